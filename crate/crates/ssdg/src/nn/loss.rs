//! Classification losses and their logit cotangents.

use ndarray::{Array1, Array2, Axis};

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean cross-entropy over the batch plus the gradient w.r.t. the logits
/// (already divided by the batch size).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    assert_eq!(b, labels.len(), "logits/labels batch mismatch");
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[(i, y)].max(1e-300).ln();
        grad[(i, y)] -= 1.0;
    }
    (loss / b as f64, grad / b as f64)
}

/// Fraction of argmax predictions matching the labels.
pub fn argmax_accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            pred == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// IRMv1 ingredients for one environment.
///
/// With a scalar multiplier `w` on the logits, the environment risk is
/// `R(w) = mean_i CE(w * z_i, y_i)` and the penalty is `(dR/dw at w=1)^2`.
/// Returns `(risk, grad_scalar g = dR/dw, dCE/dz, dg/dz)`; the caller forms
/// the penalty `g^2` and its logit cotangent `2 g * dg/dz`.
pub fn irm_env_terms(
    logits: &Array2<f64>,
    labels: &[usize],
) -> (f64, f64, Array2<f64>, Array2<f64>) {
    let b = logits.nrows() as f64;
    let (risk, dce) = cross_entropy(logits, labels);
    let probs = softmax(logits);
    let mut g = 0.0;
    let mut dg = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let zi = logits.row(i);
        let si = probs.row(i);
        let sz: f64 = zi.iter().zip(si.iter()).map(|(z, s)| z * s).sum();
        let mut onehot = Array1::zeros(zi.len());
        onehot[y] = 1.0;
        for k in 0..zi.len() {
            g += (si[k] - onehot[k]) * zi[k] / b;
            // d/dz_k of sum_j (s_j - y_j) z_j
            dg[(i, k)] = ((si[k] - onehot[k]) + si[k] * (zi[k] - sz)) / b;
        }
    }
    (risk, g, dce, dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = array![[0.0, 0.0, 0.0, 0.0]];
        let (loss, _) = cross_entropy(&logits, &[2]);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut logits = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.5]];
        let labels = [2usize, 0];
        let (_, grad) = cross_entropy(&logits, &labels);
        let eps = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let orig = logits[(i, k)];
                logits[(i, k)] = orig + eps;
                let (lp, _) = cross_entropy(&logits, &labels);
                logits[(i, k)] = orig - eps;
                let (lm, _) = cross_entropy(&logits, &labels);
                logits[(i, k)] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - grad[(i, k)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn irm_scalar_grad_matches_finite_differences() {
        let logits = array![[0.4, -0.8, 1.1], [0.2, 0.9, -0.3], [-1.0, 0.0, 0.5]];
        let labels = [0usize, 1, 2];
        let (_, g, _, dg) = irm_env_terms(&logits, &labels);
        // dR/dw at w=1 by finite differences on the scalar multiplier.
        let eps = 1e-6;
        let risk_at = |w: f64| cross_entropy(&logits.mapv(|v| v * w), &labels).0;
        let fd = (risk_at(1.0 + eps) - risk_at(1.0 - eps)) / (2.0 * eps);
        assert!((fd - g).abs() < 1e-8, "g={g} fd={fd}");
        // dg/dz by finite differences.
        let mut l2 = logits.clone();
        for i in 0..3 {
            for k in 0..3 {
                let orig = l2[(i, k)];
                l2[(i, k)] = orig + eps;
                let gp = irm_env_terms(&l2, &labels).1;
                l2[(i, k)] = orig - eps;
                let gm = irm_env_terms(&l2, &labels).1;
                l2[(i, k)] = orig;
                let fd = (gp - gm) / (2.0 * eps);
                assert!((fd - dg[(i, k)]).abs() < 1e-7);
            }
        }
    }
}
