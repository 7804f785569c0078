use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{kaiming_uniform, Layer, Param};

#[derive(Clone)]
pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out,)
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(kaiming_uniform(&[dout, din], din, rng)),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[dout]))),
            cache: None,
        }
    }

    pub fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        let s = self.weight.value.shape().to_vec();
        self.weight.value = kaiming_uniform(&s, s[1], rng);
        self.bias.value.fill(0.0);
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let x = x.into_dimensionality::<Ix2>().expect("linear input must be (B,D)");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = x.dot(&w.t()) + &b;
        self.cache = Some(x);
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let gy = gy.into_dimensionality::<Ix2>().unwrap();
        let x = self.cache.take().expect("backward before forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = gy.dot(&w);
        self.weight.grad += &gy.t().dot(&x).into_dyn();
        self.bias.grad += &gy.sum_axis(Axis(0)).into_dyn();
        dx.into_dyn()
    }

    fn params(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn kind(&self) -> &'static str {
        "linear"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone, Default)]
pub struct Relu {
    mask: Option<ArrayD<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        gy * &self.mask.take().expect("backward before forward")
    }

    fn kind(&self) -> &'static str {
        "relu"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone, Default)]
pub struct Sigmoid {
    out: Option<ArrayD<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid { out: None }
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let y = self.out.take().expect("backward before forward");
        gy * &y.mapv(|v| v * (1.0 - v))
    }

    fn kind(&self) -> &'static str {
        "sigmoid"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Inverted dropout with its own deterministic RNG stream.
#[derive(Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<ArrayD<f64>>,
}

impl Dropout {
    pub fn new(p: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::SeedableRng;
        assert!((0.0..1.0).contains(&p));
        Dropout { p, rng: ChaCha8Rng::seed_from_u64(rng.gen()), mask: None }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: ArrayD<f64>, train: bool) -> ArrayD<f64> {
        if !train || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = 1.0 - self.p;
        let mask = ArrayD::from_shape_fn(x.raw_dim(), |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        match self.mask.take() {
            Some(m) => gy * &m,
            None => gy,
        }
    }

    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Flattens `(B, C, H, W)` to `(B, C*H*W)`.
#[derive(Clone, Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { shape: None }
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let shape = x.shape().to_vec();
        let b = shape[0];
        let d: usize = shape[1..].iter().product();
        self.shape = Some(shape);
        x.into_shape_with_order(ndarray::IxDyn(&[b, d])).unwrap()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let shape = self.shape.take().expect("backward before forward");
        gy.into_shape_with_order(ndarray::IxDyn(&shape)).unwrap()
    }

    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Reshapes `(B, C*H*W)` to `(B, C, H, W)`; the decoder's entry layer.
#[derive(Clone)]
pub struct Unflatten {
    pub chw: (usize, usize, usize),
}

impl Layer for Unflatten {
    fn forward(&mut self, x: ArrayD<f64>, _train: bool) -> ArrayD<f64> {
        let b = x.shape()[0];
        let (c, h, w) = self.chw;
        x.into_shape_with_order(ndarray::IxDyn(&[b, c, h, w])).unwrap()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let b = gy.shape()[0];
        let (c, h, w) = self.chw;
        gy.into_shape_with_order(ndarray::IxDyn(&[b, c * h * w])).unwrap()
    }

    fn kind(&self) -> &'static str {
        "unflatten"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Per-channel batch normalization over `(B, H, W)` statistics.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<f64>, Array1<f64>, bool)>, // xhat, invstd, train mode
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(ndarray::IxDyn(&[c]))),
            beta: Param::new(ArrayD::zeros(ndarray::IxDyn(&[c]))),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: ArrayD<f64>, train: bool) -> ArrayD<f64> {
        let x = x.into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();

        let (mean, var) = if train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let sl = x.index_axis(Axis(1), ch);
                let m = sl.sum() / n;
                mean[ch] = m;
                var[ch] = sl.mapv(|v| (v - m) * (v - m)).sum() / n;
            }
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                // unbiased running variance, matching the usual convention
                let unbiased = if n > 1.0 { var[ch] * n / (n - 1.0) } else { var[ch] };
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let invstd = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut y = Array4::zeros((b, c, h, w));
        let mut xhat = Array4::zeros((b, c, h, w));
        for ch in 0..c {
            let xs = x.index_axis(Axis(1), ch);
            let xh = xs.mapv(|v| (v - mean[ch]) * invstd[ch]);
            y.index_axis_mut(Axis(1), ch).assign(&xh.mapv(|v| v * gamma[ch] + beta[ch]));
            xhat.index_axis_mut(Axis(1), ch).assign(&xh);
        }
        self.cache = Some((xhat, invstd, train));
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        let gy = gy.into_dimensionality::<Ix4>().unwrap();
        let (xhat, invstd, train) = self.cache.take().expect("backward before forward");
        let (b, c, h, w) = gy.dim();
        let n = (b * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dx = Array4::zeros((b, c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let g = gy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx = (&g * &xh).sum();
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let scale = gamma[ch] * invstd[ch];
            let dxc = if train {
                ndarray::Zip::from(&g)
                    .and(&xh)
                    .map_collect(|&gv, &xv| scale * (gv - sum_g / n - xv * sum_gx / n))
            } else {
                // frozen statistics: normalization is an affine map per channel
                g.mapv(|gv| scale * gv)
            };
            dx.index_axis_mut(Axis(1), ch).assign(&dxc);
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx.into_dyn()
    }

    fn params(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    fn buffers(&mut self) -> Vec<(&'static str, &mut Array1<f64>)> {
        vec![("running_mean", &mut self.running_mean), ("running_var", &mut self.running_var)]
    }

    fn kind(&self) -> &'static str {
        "batchnorm2d"
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
