//! Minimal CPU tensor layers with hand-written backward passes.
//!
//! Everything computes in f64, batch-first layout `(B, C, H, W)` for images
//! and `(B, D)` for flat features. Layers cache whatever their backward pass
//! needs during `forward`; `backward` consumes the cache and accumulates
//! parameter gradients, so callers must `zero_grads` between optimizer steps.

mod conv;
mod layers;
pub mod loss;

pub use conv::{im2col, Conv2d, ConvTranspose2d, MaxPool2d};
pub use layers::{BatchNorm2d, Dropout, Flatten, Linear, Relu, Sigmoid, Unflatten};

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A learnable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Kaiming-uniform fill: bound sqrt(6 / fan_in), the ReLU-gain convention.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

pub trait Layer: Send {
    fn forward(&mut self, x: ArrayD<f64>, train: bool) -> ArrayD<f64>;
    /// Propagates the output cotangent to the input, accumulating into
    /// parameter grads along the way.
    fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64>;
    fn params(&mut self) -> Vec<(&'static str, &mut Param)> {
        Vec::new()
    }
    /// Non-learnable state that still belongs in checkpoints (e.g. batch
    /// norm running statistics).
    fn buffers(&mut self) -> Vec<(&'static str, &mut ndarray::Array1<f64>)> {
        Vec::new()
    }
    fn kind(&self) -> &'static str;
    fn clone_box(&self) -> Box<dyn Layer>;
}

/// An ordered stack of named layers.
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Clone for Sequential {
    fn clone(&self) -> Self {
        Sequential {
            layers: self.layers.iter().map(|(n, l)| (n.clone(), l.clone_box())).collect(),
        }
    }
}

impl Default for Sequential {
    fn default() -> Self {
        Self::new()
    }
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.iter().any(|(n, _)| n == name)
    }

    pub fn forward(&mut self, x: ArrayD<f64>, train: bool) -> ArrayD<f64> {
        self.layers.iter_mut().fold(x, |h, (_, l)| l.forward(h, train))
    }

    pub fn backward(&mut self, gy: ArrayD<f64>) -> ArrayD<f64> {
        self.layers.iter_mut().rev().fold(gy, |g, (_, l)| l.backward(g))
    }

    /// Forward pass that also returns the activation right after `tap` layer.
    pub fn forward_tap(&mut self, x: ArrayD<f64>, train: bool, tap: &str) -> (ArrayD<f64>, Option<ArrayD<f64>>) {
        let mut tapped = None;
        let mut h = x;
        for (name, l) in self.layers.iter_mut() {
            h = l.forward(h, train);
            if name == tap {
                tapped = Some(h.clone());
            }
        }
        (h, tapped)
    }

    /// Backward pass that also returns the cotangent arriving at the output
    /// of `tap` layer.
    pub fn backward_tap(&mut self, gy: ArrayD<f64>, tap: &str) -> (ArrayD<f64>, Option<ArrayD<f64>>) {
        let mut tapped = None;
        let mut g = gy;
        for (name, l) in self.layers.iter_mut().rev() {
            if name == tap {
                tapped = Some(g.clone());
            }
            g = l.backward(g);
        }
        (g, tapped)
    }

    /// Visits every parameter as `(full_name, param)` with names like
    /// `conv1.weight`.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, l) in self.layers.iter_mut() {
            for (pname, p) in l.params() {
                f(format!("{name}.{pname}"), p);
            }
        }
    }

    /// Visits every non-learnable buffer as `(full_name, buffer)`.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut ndarray::Array1<f64>)) {
        for (name, l) in self.layers.iter_mut() {
            for (bname, b) in l.buffers() {
                f(format!("{name}.{bname}"), b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (name, l) in self.layers.iter_mut() {
            for (pname, p) in l.params() {
                out.push((format!("{name}.{pname}"), p));
            }
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// Derives a child RNG stream from a base seed and a context label, so that
/// independent runs (per target domain, per restart, ...) are decorrelated
/// yet reproducible and order-independent.
pub fn derive_rng(seed: u64, context: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the label, mixed with the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in context.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
