//! Gabor filter bank, binary edge-target synthesis, and the reconstruction
//! loss used by the filter-response reconstruction pretext task.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma weights, used everywhere a grayscale conversion is needed.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Hyperparameters of the Gabor bank and target-map pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GaborBankConfig {
    pub kernel_size: usize,
    /// Orientation angles in radians; must be pairwise distinct.
    pub thetas: Vec<f64>,
    /// Wavelength of the sinusoidal factor, in pixels.
    pub lambda_: f64,
    /// Std of the Gaussian envelope, in pixels.
    pub sigma: f64,
    /// Spatial aspect ratio.
    pub gamma: f64,
    /// Phase offset in radians.
    pub psi: f64,
    /// Binarization threshold applied after min-max normalization.
    pub threshold: f64,
    /// Apply the bank to each RGB channel separately (vs. on grayscale).
    pub per_channel: bool,
}

/// The seven default orientations.
pub fn default_thetas() -> Vec<f64> {
    use std::f64::consts::PI;
    vec![0.0, PI / 8.0, PI / 4.0, PI / 2.0, -PI / 8.0, -PI / 4.0, -PI / 2.0]
}

impl Default for GaborBankConfig {
    fn default() -> Self {
        GaborBankConfig {
            kernel_size: 10,
            thetas: default_thetas(),
            lambda_: 10.0,
            sigma: 4.0,
            gamma: 0.5,
            psi: 0.0,
            threshold: 0.5,
            per_channel: true,
        }
    }
}

impl GaborBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 {
            return Err(Error::config("kernel_size", format!("must be >= 3, got {}", self.kernel_size)));
        }
        if !(self.lambda_ > 0.0) {
            return Err(Error::config("lambda_", format!("must be > 0, got {}", self.lambda_)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", format!("must be in (0,1), got {}", self.threshold)));
        }
        if self.thetas.is_empty() {
            return Err(Error::config("thetas", "must be non-empty"));
        }
        for i in 0..self.thetas.len() {
            for j in (i + 1)..self.thetas.len() {
                if self.thetas[i] == self.thetas[j] {
                    return Err(Error::config("thetas", format!("duplicate angle {}", self.thetas[i])));
                }
            }
        }
        Ok(())
    }
}

/// A binarized edge-target map; entries are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTargetMap {
    pub values: Array2<u8>,
}

impl BinaryTargetMap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| v as f64)
    }
}

/// One Gabor kernel sampled on the centered grid with offsets `i - (k-1)/2`.
fn gabor_kernel(cfg: &GaborBankConfig, theta: f64) -> Array2<f64> {
    let k = cfg.kernel_size;
    let half = (k as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = theta.sin_cos();
    Array2::from_shape_fn((k, k), |(i, j)| {
        let y = i as f64 - half;
        let x = j as f64 - half;
        let xp = x * cos_t + y * sin_t;
        let yp = -x * sin_t + y * cos_t;
        let env = (-(xp * xp + cfg.gamma * cfg.gamma * yp * yp) / (2.0 * cfg.sigma * cfg.sigma)).exp();
        env * (2.0 * std::f64::consts::PI * xp / cfg.lambda_ + cfg.psi).cos()
    })
}

/// Builds one kernel per orientation, in the order of `config.thetas`.
pub fn build_gabor_bank(config: &GaborBankConfig) -> Result<Vec<Array2<f64>>> {
    config.validate()?;
    Ok(config.thetas.iter().map(|&t| gabor_kernel(config, t)).collect())
}

/// Mirror-reflect index (no edge repeat): -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// "Same"-size cross-correlation with reflect padding.
pub fn correlate2d_reflect(image: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    let off_r = (kh - 1) / 2;
    let off_c = (kw - 1) / 2;
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for u in 0..kh {
            for v in 0..kw {
                let y = reflect(i as isize + u as isize - off_r as isize, h);
                let x = reflect(j as isize + v as isize - off_c as isize, w);
                acc += kernel[(u, v)] * image[(y, x)];
            }
        }
        acc
    });
    Ok(out)
}

/// Applies the bank to every channel of a `(C, H, W)` image; output is
/// `(C, K, H, W)`.
pub fn apply_bank(image: &Array3<f64>, bank: &[Array2<f64>]) -> Result<Array4<f64>> {
    if image.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    if bank.is_empty() {
        return Err(Error::Shape("empty filter bank".into()));
    }
    let (c, h, w) = image.dim();
    let mut out = Array4::zeros((c, bank.len(), h, w));
    for ch in 0..c {
        let plane = image.index_axis(Axis(0), ch).to_owned();
        for (ki, kernel) in bank.iter().enumerate() {
            let resp = correlate2d_reflect(&plane, kernel)?;
            out.index_axis_mut(Axis(0), ch).index_axis_mut(Axis(0), ki).assign(&resp);
        }
    }
    Ok(out)
}

fn to_grayscale(image: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        GRAY_WEIGHTS[0] * image[(0, i, j)] + GRAY_WEIGHTS[1] * image[(1, i, j)] + GRAY_WEIGHTS[2] * image[(2, i, j)]
    })
}

/// The pre-threshold intensity map of [`make_target`]: filter, aggregate
/// directions by max |response|, subtract the input, grayscale, min-max
/// normalize to [0,1].
pub fn target_intensity(image: &Array3<f64>, config: &GaborBankConfig) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3-channel RGB input, got {c} channels")));
    }
    let bank = build_gabor_bank(config)?;

    let gray_diff: Array2<f64> = if config.per_channel {
        let resp = apply_bank(image, &bank)?; // (3, K, H, W)
        // per-pixel max of |response| across directions, then subtract input
        let mut diff = Array3::zeros((3, h, w));
        for ch in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let m = (0..bank.len())
                        .map(|k| resp[(ch, k, i, j)].abs())
                        .fold(f64::NEG_INFINITY, f64::max);
                    diff[(ch, i, j)] = m - image[(ch, i, j)];
                }
            }
        }
        to_grayscale(&diff)
    } else {
        let gray = to_grayscale(image);
        let gray3 = gray.clone().insert_axis(Axis(0));
        let resp = apply_bank(&gray3, &bank)?; // (1, K, H, W)
        Array2::from_shape_fn((h, w), |(i, j)| {
            let m = (0..bank.len())
                .map(|k| resp[(0, k, i, j)].abs())
                .fold(f64::NEG_INFINITY, f64::max);
            m - gray[(i, j)]
        })
    };

    // min-max normalize; an all-equal map becomes all-zero
    let min = gray_diff.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = gray_diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    Ok(if range > 0.0 {
        gray_diff.mapv(|v| (v - min) / range)
    } else {
        Array2::zeros((h, w))
    })
}

/// Deterministic binary edge target for an RGB image in [0,1].
pub fn make_target(image: &Array3<f64>, config: &GaborBankConfig) -> Result<BinaryTargetMap> {
    let intensity = target_intensity(image, config)?;
    let values = intensity.mapv(|v| if v > config.threshold { 1u8 } else { 0u8 });
    Ok(BinaryTargetMap { values })
}

/// Average pixel-wise binary cross-entropy; predictions are clamped to
/// `[1e-7, 1 - 1e-7]`.
pub const BCE_EPS: f64 = 1e-7;

pub fn reconstruction_loss(pred: &Array2<f64>, target: &BinaryTargetMap) -> Result<f64> {
    if pred.dim() != target.values.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.values.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(target.values.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = *t as f64;
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(loss / n)
}

/// Gradient of [`reconstruction_loss`] w.r.t. the (pre-clamp) predictions;
/// zero where the clamp is active.
pub fn reconstruction_loss_grad(pred: &Array2<f64>, target: &BinaryTargetMap) -> Result<Array2<f64>> {
    if pred.dim() != target.values.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.values.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((g, p), t) in grad.iter_mut().zip(pred.iter()).zip(target.values.iter()) {
        if *p < BCE_EPS || *p > 1.0 - BCE_EPS {
            *g = 0.0;
        } else {
            let t = *t as f64;
            *g = (-t / p + (1.0 - t) / (1.0 - p)) / n;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn default_bank_has_seven_10x10_kernels() {
        let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
        assert_eq!(bank.len(), 7);
        for k in &bank {
            assert_eq!(k.dim(), (10, 10));
            assert!(k.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn point_reflection_symmetry_for_zero_psi() {
        let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
        let k = 10;
        for kernel in &bank {
            for i in 0..k {
                for j in 0..k {
                    let a = kernel[(i, j)];
                    let b = kernel[(k - 1 - i, k - 1 - j)];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn odd_kernel_origin_value_is_one() {
        let cfg = GaborBankConfig { kernel_size: 11, ..Default::default() };
        let bank = build_gabor_bank(&cfg).unwrap();
        for kernel in &bank {
            assert!((kernel[(5, 5)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = GaborBankConfig { sigma: -1.0, ..Default::default() };
        let err = build_gabor_bank(&cfg).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
        let cfg = GaborBankConfig { threshold: 1.5, ..Default::default() };
        assert!(build_gabor_bank(&cfg).unwrap_err().to_string().contains("threshold"));
        let cfg = GaborBankConfig { thetas: vec![0.1, 0.1], ..Default::default() };
        assert!(build_gabor_bank(&cfg).unwrap_err().to_string().contains("thetas"));
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let cfg = GaborBankConfig { kernel_size: 5, ..Default::default() };
        let bank = build_gabor_bank(&cfg).unwrap();
        let n = 15;
        let mut img = Array2::zeros((n, n));
        img[(7, 7)] = 1.0;
        for kernel in &bank {
            let resp = correlate2d_reflect(&img, kernel).unwrap();
            // out(i,j) = K(7-i+2, 7-j+2) inside the window
            for u in 0..5usize {
                for v in 0..5usize {
                    let i = 7 + 2 - u as i64;
                    let j = 7 + 2 - v as i64;
                    assert!((resp[(i as usize, j as usize)] - kernel[(u, v)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_image_correlates_to_kernel_sum() {
        let cfg = GaborBankConfig::default();
        let bank = build_gabor_bank(&cfg).unwrap();
        let img = Array2::from_elem((16, 16), 0.37);
        for kernel in &bank {
            let resp = correlate2d_reflect(&img, kernel).unwrap();
            let expect = 0.37 * kernel.sum();
            // reflect padding of a constant image is constant, so all pixels qualify
            for v in resp.iter() {
                assert!((v - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_color_image_gives_all_zero_target() {
        let mut img = Array3::zeros((3, 16, 16));
        img.index_axis_mut(Axis(0), 0).fill(0.6);
        img.index_axis_mut(Axis(0), 1).fill(0.2);
        img.index_axis_mut(Axis(0), 2).fill(0.9);
        let t = make_target(&img, &GaborBankConfig::default()).unwrap();
        assert!(t.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn make_target_is_deterministic_and_binary() {
        let mut rng = crate::nn::derive_rng(7, "gabor-test");
        use rand::Rng;
        let img = Array3::from_shape_fn((3, 16, 16), |_| rng.gen::<f64>());
        let cfg = GaborBankConfig::default();
        let a = make_target(&img, &cfg).unwrap();
        let b = make_target(&img, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.dim(), (16, 16));
        assert!(a.values.iter().all(|&v| v <= 1));
    }

    #[test]
    fn non_rgb_input_rejected() {
        let img = Array3::zeros((1, 16, 16));
        assert!(make_target(&img, &GaborBankConfig::default()).is_err());
    }

    #[test]
    fn loss_at_half_is_ln_two() {
        let target = BinaryTargetMap { values: Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as u8) };
        let pred = Array2::from_elem((4, 4), 0.5);
        let loss = reconstruction_loss(&pred, &target).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        let target = BinaryTargetMap { values: Array2::from_shape_fn((4, 4), |(i, _)| (i % 2) as u8) };
        let loss = reconstruction_loss(&target.to_f64(), &target).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-6);
    }

    #[test]
    fn loss_shape_mismatch_is_error() {
        let target = BinaryTargetMap { values: Array2::zeros((4, 4)) };
        assert!(reconstruction_loss(&Array2::from_elem((4, 5), 0.5), &target).is_err());
    }
}
