//! Class-activation heatmaps: spatial-mean gradient weights over a tapped
//! convolutional activation, ReLU-combined, upsampled, and normalized.

use ndarray::{Array2, Array3, Axis};

use crate::dg::Classifier;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Heatmap {
    /// input-resolution grid in [0,1]
    pub values: Array2<f64>,
    pub layer: String,
    pub class_idx: usize,
}

/// Bilinear upsampling with corner alignment.
pub fn bilinear_upsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    for i in 0..out_h {
        for j in 0..out_w {
            let fy = i as f64 * sy;
            let fx = j as f64 * sx;
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dy = fy - y0 as f64;
            let dx = fx - x0 as f64;
            out[(i, j)] = map[(y0, x0)] * (1.0 - dy) * (1.0 - dx)
                + map[(y0, x1)] * (1.0 - dy) * dx
                + map[(y1, x0)] * dy * (1.0 - dx)
                + map[(y1, x1)] * dy * dx;
        }
    }
    out
}

fn min_max_normalize(map: &mut Array2<f64>) {
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min > 1e-12 {
        map.mapv_inplace(|v| (v - min) / (max - min));
    } else if max > 0.0 {
        map.fill(1.0);
    } else {
        map.fill(0.0);
    }
}

/// Heatmap for `class_idx` w.r.t. the pre-softmax logit, taken at the output
/// of `layer` in the feature extractor.
pub fn gradcam(classifier: &mut Classifier, image: &Array3<f64>, class_idx: usize, layer: &str) -> Result<Heatmap> {
    let (_, in_h, in_w) = image.dim();
    let x = image.clone().insert_axis(Axis(0)).into_dyn();
    let (rep, act) = classifier.extractor.net.forward_tap(x, false, layer);
    let act = act.ok_or_else(|| Error::config("layer", format!("layer {layer:?} not found in extractor")))?;
    let act = act
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::config("layer", format!("layer {layer:?} does not produce a spatial activation")))?;

    let rep2 = rep.into_dimensionality::<ndarray::Ix2>().unwrap();
    let logits = classifier
        .head
        .forward(&rep2, false)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    if class_idx >= logits.ncols() {
        return Err(Error::config(
            "class_idx",
            format!("class {class_idx} out of range for {} logits", logits.ncols()),
        ));
    }
    let mut dlogits = Array2::zeros(logits.raw_dim());
    dlogits[(0, class_idx)] = 1.0;
    let rep_grad = classifier.head.backward(dlogits.into_dyn());
    let (_, tap_grad) = classifier.extractor.net.backward_tap(rep_grad.into_dyn(), layer);
    let tap_grad = tap_grad.unwrap().into_dimensionality::<ndarray::Ix4>().unwrap();

    let (_, c, h, w) = act.dim();
    let mut map = Array2::zeros((h, w));
    for k in 0..c {
        let alpha = tap_grad.slice(ndarray::s![0, k, .., ..]).mean().unwrap();
        map += &(&act.slice(ndarray::s![0, k, .., ..]) * alpha);
    }
    map.mapv_inplace(|v| v.max(0.0));
    let mut up = bilinear_upsample(&map, in_h, in_w);
    min_max_normalize(&mut up);
    Ok(Heatmap { values: up, layer: layer.to_string(), class_idx })
}

/// Alpha-blends a warm-to-cold colormap of the heatmap over the image:
/// high values pull toward red, low toward blue.
pub fn render_overlay(image: &Array3<f64>, heatmap: &Heatmap, alpha: f64) -> Array3<f64> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3);
    assert_eq!(heatmap.values.dim(), (h, w));
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let v = heatmap.values[(i, j)];
            let color = [v, 0.25 * (1.0 - (2.0 * v - 1.0).abs()), 1.0 - v];
            for ch in 0..3 {
                out[(ch, i, j)] = ((1.0 - alpha) * image[(ch, i, j)] + alpha * color[ch]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// The default tap: output of the last pooling stage, i.e. the activation
/// map that feeds the flattened representation.
pub fn default_gradcam_layer(classifier: &Classifier) -> &'static str {
    let _ = classifier;
    "pool3"
}
