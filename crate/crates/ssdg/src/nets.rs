//! Backbone and task-head builders.
//!
//! The `alexnet` variant follows the classic five-conv-block layout with
//! batch normalization after every conv block and a `(256, 6, 6)` final map
//! at 224x224 input. The `small` variant is a three-block desk-scale stand-in
//! for 64x64 (or 32x32) inputs.

use ndarray::{Array2, Array4, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    derive_rng, BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Flatten, Linear, MaxPool2d, Relu,
    Sequential, Sigmoid, Unflatten,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Alexnet,
    Small,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Width of the first two conv blocks for the alexnet variant (96 classic,
    /// 64 for rotation/gabor-style pretraining). Ignored by `small`.
    pub first_block_filters: usize,
    pub input_size: usize,
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn alexnet(first_block_filters: usize) -> Self {
        BackboneConfig { variant: Variant::Alexnet, first_block_filters, input_size: 224, batch_norm: true }
    }

    pub fn small(input_size: usize) -> Self {
        BackboneConfig { variant: Variant::Small, first_block_filters: 32, input_size, batch_norm: true }
    }

    /// Shape of the final conv map `(C, H, W)` for this config.
    pub fn final_map(&self) -> Result<(usize, usize, usize)> {
        match self.variant {
            Variant::Alexnet => {
                if self.input_size != 224 {
                    return Err(Error::config(
                        "input_size",
                        format!("alexnet variant requires 224, got {}", self.input_size),
                    ));
                }
                Ok((256, 6, 6))
            }
            Variant::Small => {
                if self.input_size % 16 != 0 || self.input_size < 32 {
                    return Err(Error::config(
                        "input_size",
                        format!("small variant requires a multiple of 16 >= 32, got {}", self.input_size),
                    ));
                }
                let s = self.input_size / 16;
                Ok((64, s, s))
            }
        }
    }

    pub fn rep_dim(&self) -> Result<usize> {
        let (c, h, w) = self.final_map()?;
        Ok(c * h * w)
    }
}

/// The shared encoder: conv stack plus flatten, exposing the flattened last
/// conv block as the representation.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub net: Sequential,
    pub config: BackboneConfig,
    pub rep_dim: usize,
    /// Name of the last conv-block activation, the default GradCAM target.
    pub last_conv_relu: String,
}

impl FeatureExtractor {
    /// Encodes a `(B, 3, H, W)` batch into `(B, rep_dim)`.
    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array2<f64> {
        self.net
            .forward(x.clone().into_dyn(), train)
            .into_dimensionality::<Ix2>()
            .expect("extractor output must be flat")
    }

    pub fn backward(&mut self, grad: Array2<f64>) -> ArrayD<f64> {
        self.net.backward(grad.into_dyn())
    }
}

fn push_block(
    net: &mut Sequential,
    idx: usize,
    conv: Conv2d,
    cout: usize,
    batch_norm: bool,
    pool: Option<(usize, usize)>,
) {
    net.push(format!("conv{idx}"), conv);
    if batch_norm {
        net.push(format!("bn{idx}"), BatchNorm2d::new(cout));
    }
    net.push(format!("relu{idx}"), Relu::new());
    if let Some((k, s)) = pool {
        net.push(format!("pool{idx}"), MaxPool2d::new(k, s));
    }
}

/// Builds the shared feature extractor with seeded initialization.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<FeatureExtractor> {
    let rep_dim = config.rep_dim()?;
    let mut rng = derive_rng(seed, "backbone");
    let bn = config.batch_norm;
    let mut net = Sequential::new();
    let last = match config.variant {
        Variant::Alexnet => {
            let f1 = config.first_block_filters;
            if f1 != 64 && f1 != 96 {
                return Err(Error::config(
                    "first_block_filters",
                    format!("alexnet variant expects 64 or 96, got {f1}"),
                ));
            }
            // first two blocks carry f1 filters when narrowed to 64
            let f2 = if f1 == 64 { 64 } else { 256 };
            push_block(&mut net, 1, Conv2d::new(3, f1, 11, 4, 2, &mut rng), f1, bn, Some((3, 2)));
            push_block(&mut net, 2, Conv2d::new(f1, f2, 5, 1, 2, &mut rng), f2, bn, Some((3, 2)));
            push_block(&mut net, 3, Conv2d::new(f2, 384, 3, 1, 1, &mut rng), 384, bn, None);
            push_block(&mut net, 4, Conv2d::new(384, 384, 3, 1, 1, &mut rng), 384, bn, None);
            push_block(&mut net, 5, Conv2d::new(384, 256, 3, 1, 1, &mut rng), 256, bn, Some((3, 2)));
            "relu5"
        }
        Variant::Small => {
            push_block(&mut net, 1, Conv2d::new(3, 32, 5, 2, 2, &mut rng), 32, bn, Some((2, 2)));
            push_block(&mut net, 2, Conv2d::new(32, 64, 3, 1, 1, &mut rng), 64, bn, Some((2, 2)));
            push_block(&mut net, 3, Conv2d::new(64, 64, 3, 1, 1, &mut rng), 64, bn, Some((2, 2)));
            "relu3"
        }
    };
    net.push("flatten", Flatten::new());
    Ok(FeatureExtractor { net, config: config.clone(), rep_dim, last_conv_relu: last.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Rotation,
    Cluster,
    Dg,
    Decoder,
}

/// A task-specific module on top of the shared representation.
#[derive(Clone)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub net: Sequential,
    pub out_dim: usize,
}

impl TaskHead {
    pub fn forward(&mut self, rep: &Array2<f64>, train: bool) -> ArrayD<f64> {
        self.net.forward(rep.clone().into_dyn(), train)
    }

    pub fn backward(&mut self, grad: ArrayD<f64>) -> Array2<f64> {
        self.net
            .backward(grad)
            .into_dimensionality::<Ix2>()
            .expect("head input grad must be flat")
    }
}

fn hidden_dim(rep_dim: usize) -> usize {
    if rep_dim >= 9216 {
        4096
    } else {
        256
    }
}

fn mlp_head(rep_dim: usize, out_dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Sequential {
    let h = hidden_dim(rep_dim);
    let mut net = Sequential::new();
    net.push("drop1", Dropout::new(0.5, rng));
    net.push("fc1", Linear::new(rep_dim, h, rng));
    net.push("relu1", Relu::new());
    net.push("drop2", Dropout::new(0.5, rng));
    net.push("fc2", Linear::new(h, h, rng));
    net.push("relu2", Relu::new());
    net.push("fc3", Linear::new(h, out_dim, rng));
    net
}

/// Builds the decoder that mirrors the encoder of `config` with transposed
/// convolutions, ending in a single-channel sigmoid output at the input
/// resolution.
pub fn build_decoder(config: &BackboneConfig, seed: u64) -> Result<TaskHead> {
    let (c, h, w) = config.final_map()?;
    let mut rng = derive_rng(seed, "decoder");
    let bn = config.batch_norm;
    let mut net = Sequential::new();
    net.push("unflatten", Unflatten { chw: (c, h, w) });
    let up = |net: &mut Sequential, name: String, layer: ConvTranspose2d, cout: usize, act: bool| {
        net.push(name.clone(), layer);
        if act {
            if bn {
                net.push(format!("{name}_bn"), BatchNorm2d::new(cout));
            }
            net.push(format!("{name}_relu"), Relu::new());
        }
    };
    match config.variant {
        Variant::Alexnet => {
            let f1 = config.first_block_filters;
            let f2 = if f1 == 64 { 64 } else { 256 };
            up(&mut net, "unpool3".into(), ConvTranspose2d::new(256, 256, 3, 2, 0, 0, &mut rng), 256, true);
            up(&mut net, "deconv5".into(), ConvTranspose2d::new(256, 384, 3, 1, 1, 0, &mut rng), 384, true);
            up(&mut net, "deconv4".into(), ConvTranspose2d::new(384, 384, 3, 1, 1, 0, &mut rng), 384, true);
            up(&mut net, "deconv3".into(), ConvTranspose2d::new(384, f2, 3, 1, 1, 0, &mut rng), f2, true);
            up(&mut net, "unpool2".into(), ConvTranspose2d::new(f2, f2, 3, 2, 0, 0, &mut rng), f2, true);
            up(&mut net, "deconv2".into(), ConvTranspose2d::new(f2, f1, 5, 1, 2, 0, &mut rng), f1, true);
            up(&mut net, "unpool1".into(), ConvTranspose2d::new(f1, f1, 3, 2, 0, 0, &mut rng), f1, true);
            up(&mut net, "deconv1".into(), ConvTranspose2d::new(f1, 1, 11, 4, 2, 1, &mut rng), 1, false);
        }
        Variant::Small => {
            up(&mut net, "unpool3".into(), ConvTranspose2d::new(64, 64, 2, 2, 0, 0, &mut rng), 64, true);
            up(&mut net, "deconv3".into(), ConvTranspose2d::new(64, 64, 3, 1, 1, 0, &mut rng), 64, true);
            up(&mut net, "unpool2".into(), ConvTranspose2d::new(64, 64, 2, 2, 0, 0, &mut rng), 64, true);
            up(&mut net, "deconv2".into(), ConvTranspose2d::new(64, 32, 3, 1, 1, 0, &mut rng), 32, true);
            up(&mut net, "unpool1".into(), ConvTranspose2d::new(32, 32, 2, 2, 0, 0, &mut rng), 32, true);
            up(&mut net, "deconv1".into(), ConvTranspose2d::new(32, 1, 5, 2, 2, 1, &mut rng), 1, false);
        }
    }
    net.push("sigmoid", Sigmoid::new());
    Ok(TaskHead { kind: HeadKind::Decoder, net, out_dim: config.input_size * config.input_size })
}

/// Builds a task head for a given representation size.
///
/// For `Decoder` the backbone geometry is inferred from `rep_dim`
/// (9216 -> alexnet@224, otherwise small with the matching input size);
/// use [`build_decoder`] when a config is at hand.
pub fn build_head(kind: HeadKind, rep_dim: usize, out_dim: usize, seed: u64) -> Result<TaskHead> {
    if rep_dim == 0 {
        return Err(Error::config("rep_dim", "must be > 0"));
    }
    if out_dim == 0 {
        return Err(Error::config("out_dim", "must be > 0"));
    }
    let mut rng = derive_rng(seed, "head");
    match kind {
        HeadKind::Rotation => {
            if out_dim != 4 {
                return Err(Error::config("out_dim", format!("rotation head requires out_dim = 4, got {out_dim}")));
            }
            Ok(TaskHead { kind, net: mlp_head(rep_dim, 4, &mut rng), out_dim: 4 })
        }
        HeadKind::Cluster => Ok(TaskHead { kind, net: mlp_head(rep_dim, out_dim, &mut rng), out_dim }),
        HeadKind::Dg => {
            let mut net = Sequential::new();
            net.push("fc", Linear::new(rep_dim, out_dim, &mut rng));
            Ok(TaskHead { kind, net, out_dim })
        }
        HeadKind::Decoder => {
            let cfg = match rep_dim {
                9216 => BackboneConfig::alexnet(64),
                d => {
                    // small final map is (64, s, s) with s = input/16
                    let s2 = d / 64;
                    let s = (s2 as f64).sqrt() as usize;
                    if s * s != s2 || d % 64 != 0 {
                        return Err(Error::config("rep_dim", format!("no known decoder geometry for rep_dim {d}")));
                    }
                    BackboneConfig::small(16 * s)
                }
            };
            build_decoder(&cfg, seed)
        }
    }
}

/// Re-initializes head parameters from a seeded initializer.
///
/// Cluster heads re-initialize only the final layer (the per-epoch
/// pseudo-label reassignment contract); all other kinds re-initialize every
/// layer.
pub fn reinit_head(head: &mut TaskHead, seed: u64) {
    let mut rng = derive_rng(seed, "reinit");
    let only_final = matches!(head.kind, HeadKind::Cluster);
    head.net.visit_params(&mut |name, p| {
        if only_final && !name.starts_with("fc3.") {
            return;
        }
        let shape = p.value.shape().to_vec();
        if name.ends_with(".weight") && shape.len() >= 2 {
            let fan_in: usize = shape[1..].iter().product();
            p.value = crate::nn::kaiming_uniform(&shape, fan_in, &mut rng);
        } else if name.ends_with(".gamma") {
            p.value.fill(1.0);
        } else {
            p.value.fill(0.0);
        }
    });
}
