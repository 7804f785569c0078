//! Domain-generalization evaluation: fine-tuning on pooled source domains
//! (plain risk minimization or the invariant-risk penalty variant),
//! leave-one-domain-out sweeps, and single-source cross-domain transfer.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ckpt::assign_named;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{build_backbone, build_head, BackboneConfig, FeatureExtractor, HeadKind, TaskHead};
use crate::nn::loss::{cross_entropy, irm_env_terms};
use crate::nn::derive_rng;
use crate::trainer::{OptimConfig, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Irm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irm => "irm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "irm" => Ok(Method::Irm),
            other => Err(Error::config("method", format!("unknown method {other:?} (expected erm or irm)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    /// coefficient of the invariance penalty after warm-up
    pub irm_penalty_weight: f64,
    /// fraction of total steps over which the penalty coefficient ramps
    /// linearly from 0
    pub irm_warmup_frac: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optim: OptimConfig { lr: 0.001, epochs: 30, ..OptimConfig::default() },
            irm_penalty_weight: 1e4,
            irm_warmup_frac: 0.1,
        }
    }
}

/// Outcome of one fine-tuning run. Both selection rules are recorded: the
/// target-selected best (what the reference results report) and the accuracy
/// at the epoch with the best source validation score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub target: String,
    pub method: String,
    pub init: String,
    pub seed: u64,
    pub config_hash: String,
    /// index 0 is the untrained model; entry e is after epoch e
    pub source_val_acc: Vec<f64>,
    pub target_acc: Vec<f64>,
    pub best_target_acc: f64,
    pub target_acc_at_best_source_val: f64,
    /// mean-over-environments risk per optimization step
    pub step_losses: Vec<f64>,
    /// mean-over-environments raw (unscaled) invariance penalty per step;
    /// zeros for the plain method
    pub step_penalties: Vec<f64>,
}

/// Per-step fine-tuning loss CSV (columns: step, epoch, risk, penalty).
pub fn write_finetune_loss_csv(path: impl AsRef<Path>, result: &ExperimentResult, steps_per_epoch: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["step", "epoch", "risk", "penalty"]).map_err(|e| Error::Data(e.to_string()))?;
    for (i, (risk, pen)) in result.step_losses.iter().zip(&result.step_penalties).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            (i / steps_per_epoch.max(1)).to_string(),
            format!("{:.17e}", risk),
            format!("{:.17e}", pen),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Steps per epoch for a source set under a batch size (the longest
/// environment sets the pace; shorter ones cycle).
pub fn steps_per_epoch(sources: &[&DomainDataset], batch_size: usize) -> usize {
    sources
        .iter()
        .map(|s| s.train_idx.len().div_ceil(batch_size))
        .max()
        .unwrap_or(1)
        .max(1)
}

/// Exact-match fraction.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy needs equal nonzero lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub struct Classifier {
    pub extractor: FeatureExtractor,
    pub head: TaskHead,
}

impl Classifier {
    pub fn logits(&mut self, x: &Array4<f64>, train: bool) -> Array2<f64> {
        let rep = self.extractor.forward(x, train);
        self.head.forward(&rep, train).into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    /// Eval-mode accuracy over an index subset, chunked.
    pub fn evaluate(&mut self, data: &DomainDataset, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty index set".into()));
        }
        let mut preds = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(64) {
            let (batch, ys) = data.gather(chunk);
            let logits = self.logits(&batch, false);
            for row in logits.axis_iter(Axis(0)) {
                let p = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                preds.push(p);
            }
            labels.extend(ys);
        }
        accuracy(&preds, &labels)
    }
}

/// Builds extractor + fresh linear classification head, optionally loading
/// pretrained extractor tensors (keys scoped `extractor.*`).
pub fn build_classifier(
    backbone: &BackboneConfig,
    n_classes: usize,
    seed: u64,
    init: Option<&BTreeMap<String, ArrayD<f64>>>,
) -> Result<Classifier> {
    let mut extractor = build_backbone(backbone, seed)?;
    if let Some(tensors) = init {
        assign_named("extractor", &mut extractor.net, tensors)?;
    }
    let head = build_head(HeadKind::Dg, extractor.rep_dim, n_classes, seed.wrapping_add(77))?;
    Ok(Classifier { extractor, head })
}

fn validate_domains(sources: &[&DomainDataset], target: &DomainDataset) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Data("at least one source domain required".into()));
    }
    for s in sources {
        if s.name == target.name {
            return Err(Error::Data(format!("target domain {} also appears as a source", target.name)));
        }
        if s.class_names != target.class_names {
            return Err(Error::Data(format!(
                "class mismatch: {} has {:?}, {} has {:?}",
                s.name, s.class_names, target.name, target.class_names
            )));
        }
    }
    Ok(())
}

/// Core fine-tuning loop shared by both methods. Every step draws one
/// equal-size mini-batch per source domain and forwards each domain
/// separately; the objective is the mean over domains of the per-domain
/// cross-entropy, plus (for the invariance method) the mean scaled
/// gradient-penalty term. With penalty weight 0 the two methods follow
/// bit-identical trajectories by construction.
pub fn finetune(
    classifier: &mut Classifier,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    method: Method,
    cfg: &FinetuneConfig,
    seed: u64,
    config_hash: &str,
    init_label: &str,
) -> Result<ExperimentResult> {
    validate_domains(sources, target)?;
    if method == Method::Irm && sources.len() < 2 {
        return Err(Error::Data(
            "the invariance penalty needs at least 2 source domains; one environment makes it vacuous".into(),
        ));
    }

    let mut opt = Sgd::new(OptimConfig { seed, ..cfg.optim.clone() });
    let e_count = sources.len();
    let batch = cfg.optim.batch_size;
    let per_epoch = steps_per_epoch(sources, batch);
    let total_steps = (per_epoch * cfg.optim.epochs).max(1);

    let target_all: Vec<usize> = (0..target.len()).collect();
    let mut source_val_acc = Vec::new();
    let mut target_acc = Vec::new();
    let mut record_eval = |c: &mut Classifier| -> Result<()> {
        let mut val = 0.0;
        for s in sources {
            val += c.evaluate(s, &s.val_idx)?;
        }
        source_val_acc.push(val / e_count as f64);
        target_acc.push(c.evaluate(target, &target_all)?);
        Ok(())
    };
    record_eval(classifier)?;

    let mut step = 0usize;
    let mut step_losses = Vec::new();
    let mut step_penalties = Vec::new();
    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        // per-environment shuffled index streams, cycled to equal length
        let mut streams: Vec<Vec<usize>> = Vec::with_capacity(e_count);
        for s in sources {
            let mut idx = s.train_idx.clone();
            let mut rng = derive_rng(seed, &format!("ft-order/{}/{epoch}", s.name));
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            streams.push(idx);
        }
        for st in 0..per_epoch {
            classifier.extractor.net.zero_grads();
            classifier.head.net.zero_grads();
            let warm = ((step + 1) as f64 / (cfg.irm_warmup_frac * total_steps as f64).max(1.0)).min(1.0);
            let lambda = match method {
                Method::Erm => 0.0,
                Method::Irm => cfg.irm_penalty_weight * warm,
            };
            let mut risk_sum = 0.0;
            let mut penalty_sum = 0.0;
            for (e, s) in sources.iter().enumerate() {
                let idx: Vec<usize> =
                    (0..batch).map(|i| streams[e][(st * batch + i) % streams[e].len()]).collect();
                let (x, ys) = s.gather(&idx);
                let logits = classifier.logits(&x, true);
                // mean over environments of risk (+ penalty); the head and
                // extractor receive the summed per-environment cotangents
                let grad = match method {
                    Method::Erm => {
                        let (risk, dce) = cross_entropy(&logits, &ys);
                        risk_sum += risk;
                        dce / e_count as f64
                    }
                    Method::Irm => {
                        let (risk, g, dce, dg) = irm_env_terms(&logits, &ys);
                        risk_sum += risk;
                        penalty_sum += g * g;
                        (dce + dg * (2.0 * g * lambda)) / e_count as f64
                    }
                };
                let rep_grad = classifier.head.backward(grad.into_dyn());
                classifier.extractor.backward(rep_grad);
            }
            step_losses.push(risk_sum / e_count as f64);
            step_penalties.push(penalty_sum / e_count as f64);
            opt.step_net("extractor", &mut classifier.extractor.net, lr)?;
            opt.step_net("head", &mut classifier.head.net, lr)?;
            step += 1;
        }
        record_eval(classifier)?;
    }

    let best_target_acc = target_acc.iter().cloned().fold(0.0, f64::max);
    let best_val_epoch = source_val_acc
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(ExperimentResult {
        target: target.name.clone(),
        method: method.as_str().to_string(),
        init: init_label.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        best_target_acc,
        target_acc_at_best_source_val: target_acc[best_val_epoch],
        source_val_acc,
        target_acc,
        step_losses,
        step_penalties,
    })
}

pub fn erm_finetune(
    classifier: &mut Classifier,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    cfg: &FinetuneConfig,
    seed: u64,
    config_hash: &str,
    init_label: &str,
) -> Result<ExperimentResult> {
    finetune(classifier, sources, target, Method::Erm, cfg, seed, config_hash, init_label)
}

pub fn irm_finetune(
    classifier: &mut Classifier,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    cfg: &FinetuneConfig,
    seed: u64,
    config_hash: &str,
    init_label: &str,
) -> Result<ExperimentResult> {
    finetune(classifier, sources, target, Method::Irm, cfg, seed, config_hash, init_label)
}

/// Single-source transfer (plain risk minimization with N = 1).
pub fn cross_domain(
    classifier: &mut Classifier,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &FinetuneConfig,
    seed: u64,
    config_hash: &str,
    init_label: &str,
) -> Result<ExperimentResult> {
    finetune(classifier, &[source], target, Method::Erm, cfg, seed, config_hash, init_label)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<ExperimentResult>,
    pub average_best: f64,
    pub average_source_selected: f64,
    pub config_hash: String,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn config_hash(backbone: &BackboneConfig, cfg: &FinetuneConfig, method: Method) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&(backbone, cfg, method)).unwrap());
    format!("{:x}", hasher.finalize())[..16].to_string()
}

/// Derives the per-run RNG seed from (config hash, target name, sweep seed)
/// so sweep rows are independent of domain-list order.
pub fn run_seed(hash: &str, target: &str, seed: u64) -> u64 {
    fnv1a(&format!("{hash}/{target}/{seed}"))
}

/// Holds out each domain in turn, fine-tunes on the rest, and tabulates the
/// per-target and average accuracies.
pub fn leave_one_out_sweep(
    domains: &[DomainDataset],
    method: Method,
    backbone: &BackboneConfig,
    init: Option<&BTreeMap<String, ArrayD<f64>>>,
    init_label: &str,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<SweepResult> {
    leave_one_out_sweep_jobs(domains, method, backbone, init, init_label, cfg, seed, 1)
}

/// As [`leave_one_out_sweep`] but running up to `jobs` held-out targets in
/// parallel; per-run seeds are keyed by target name, so results are
/// identical regardless of parallelism.
#[allow(clippy::too_many_arguments)]
pub fn leave_one_out_sweep_jobs(
    domains: &[DomainDataset],
    method: Method,
    backbone: &BackboneConfig,
    init: Option<&BTreeMap<String, ArrayD<f64>>>,
    init_label: &str,
    cfg: &FinetuneConfig,
    seed: u64,
    jobs: usize,
) -> Result<SweepResult> {
    if domains.len() < 2 {
        return Err(Error::Data("leave-one-out needs at least 2 domains".into()));
    }
    let hash = config_hash(backbone, cfg, method);
    let n_classes = domains[0].class_names.len();
    let run_one = |ti: usize| -> Result<ExperimentResult> {
        let target = &domains[ti];
        let sources: Vec<&DomainDataset> =
            domains.iter().enumerate().filter(|(i, _)| *i != ti).map(|(_, d)| d).collect();
        let rs = run_seed(&hash, &target.name, seed);
        let mut classifier = build_classifier(backbone, n_classes, rs, init)?;
        finetune(&mut classifier, &sources, target, method, cfg, rs, &hash, init_label)
    };
    let mut rows: Vec<ExperimentResult> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Data(e.to_string()))?;
        pool.install(|| (0..domains.len()).into_par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    } else {
        (0..domains.len()).map(run_one).collect::<Result<Vec<_>>>()?
    };
    rows.sort_by(|a, b| a.target.cmp(&b.target));
    let n = rows.len() as f64;
    let average_best = rows.iter().map(|r| r.best_target_acc).sum::<f64>() / n;
    let average_source_selected = rows.iter().map(|r| r.target_acc_at_best_source_val).sum::<f64>() / n;
    Ok(SweepResult { rows, average_best, average_source_selected, config_hash: hash })
}

/// Writes `results.csv` (one row per target plus an `average` row) and
/// `results.json` (full per-epoch traces).
pub fn write_sweep(dir: impl AsRef<Path>, sweep: &SweepResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv")).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["target", "method", "init", "seed", "best_target_acc", "source_selected_acc", "config_hash"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in &sweep.rows {
        w.write_record([
            r.target.clone(),
            r.method.clone(),
            r.init.clone(),
            r.seed.to_string(),
            format!("{:.17e}", r.best_target_acc),
            format!("{:.17e}", r.target_acc_at_best_source_val),
            r.config_hash.clone(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    let r0 = &sweep.rows[0];
    w.write_record([
        "average".to_string(),
        r0.method.clone(),
        r0.init.clone(),
        String::new(),
        format!("{:.17e}", sweep.average_best),
        format!("{:.17e}", sweep.average_source_selected),
        sweep.config_hash.clone(),
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    w.flush()?;
    let json = serde_json::to_string_pretty(sweep)?;
    std::fs::write(dir.join("results.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domains, SYNTH_CLASSES};
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn classes() -> Vec<String> {
        SYNTH_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    fn tiny_cfg(epochs: usize, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            optim: OptimConfig { lr: 0.001, epochs, batch_size: 8, seed, ..OptimConfig::default() },
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn accuracy_exact_fractions() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn pooled_loss_equals_weighted_mean_of_domain_losses() {
        // Eq-1 style consistency: CE over a pooled batch equals the
        // sample-count-weighted mean of per-domain CE values
        let ds = synth_domains(0, &classes(), 3, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let mut c = build_classifier(&backbone, 5, 1, None).unwrap();
        let idx_a: Vec<usize> = (0..6).collect();
        let idx_b: Vec<usize> = (0..9).collect();
        let (xa, ya) = ds[0].gather(&idx_a);
        let (xb, yb) = ds[1].gather(&idx_b);
        let la = cross_entropy(&c.logits(&xa, false), &ya).0;
        let lb = cross_entropy(&c.logits(&xb, false), &yb).0;
        let pooled_x = ndarray::concatenate![Axis(0), xa, xb];
        let mut pooled_y = ya.clone();
        pooled_y.extend(yb.iter());
        let lp = cross_entropy(&c.logits(&pooled_x, false), &pooled_y).0;
        let weighted = (6.0 * la + 9.0 * lb) / 15.0;
        assert_abs_diff_eq!(lp, weighted, epsilon = 1e-6);
    }

    #[test]
    fn irm_lambda_zero_equals_erm() {
        let ds = synth_domains(2, &classes(), 2, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let cfg = FinetuneConfig { irm_penalty_weight: 0.0, ..tiny_cfg(2, 3) };
        let sources: Vec<&DomainDataset> = vec![&ds[0], &ds[1], &ds[2]];
        let mut ca = build_classifier(&backbone, 5, 9, None).unwrap();
        let mut cb = build_classifier(&backbone, 5, 9, None).unwrap();
        let ra = finetune(&mut ca, &sources, &ds[3], Method::Erm, &cfg, 9, "h", "random").unwrap();
        let rb = finetune(&mut cb, &sources, &ds[3], Method::Irm, &cfg, 9, "h", "random").unwrap();
        let mut pa = Vec::new();
        ca.extractor.net.visit_params(&mut |n, p| pa.push((n, p.value.clone())));
        let mut pb = Vec::new();
        cb.extractor.net.visit_params(&mut |n, p| pb.push((n, p.value.clone())));
        for ((na, a), (_, b)) in pa.iter().zip(pb.iter()) {
            let max_diff = (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_diff < 1e-7, "{na}: {max_diff}");
        }
        for (x, y) in ra.target_acc.iter().zip(rb.target_acc.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn penalty_zero_at_per_environment_optimum() {
        // a linear predictor already optimal for each environment: the
        // scale-gradient vanishes, so the penalty is ~0
        use crate::nn::loss::irm_env_terms;
        // logits that softmax to (almost) the one-hot labels in both envs
        let big = 30.0;
        let logits = ndarray::array![[big, 0.0], [0.0, big]];
        let labels = [0usize, 1];
        let (_, g, _, _) = irm_env_terms(&logits, &labels);
        assert!(g * g <= 1e-8, "penalty {}", g * g);
        let _ = Array1::<f64>::zeros(1);
    }

    #[test]
    fn best_target_dominates_trace_and_chance_start() {
        let ds = synth_domains(4, &classes(), 3, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let cfg = tiny_cfg(2, 5);
        let sources: Vec<&DomainDataset> = vec![&ds[0], &ds[1], &ds[2]];
        let mut c = build_classifier(&backbone, 5, 5, None).unwrap();
        let r = erm_finetune(&mut c, &sources, &ds[3], &cfg, 5, "h", "random").unwrap();
        for &a in &r.target_acc {
            assert!(r.best_target_acc >= a);
            assert!((0.0..=1.0).contains(&a));
        }
        // untrained 5-class head starts near chance (3 sigma binomial band,
        // n=15)
        let p0 = r.target_acc[0];
        let sigma = (0.2f64 * 0.8 / 15.0).sqrt();
        assert!((p0 - 0.2).abs() <= 3.0 * sigma + 1e-9, "epoch-0 acc {p0}");
        assert_eq!(r.target_acc.len(), cfg.optim.epochs + 1);
    }

    #[test]
    fn single_source_equals_plain_supervised_training() {
        // N=1 with source = the target's own train split degenerates to
        // ordinary supervised training on that split
        let ds = synth_domains(6, &classes(), 3, 32).unwrap();
        let target = &ds[3];
        let mut source = target.clone();
        source.name = "self_train".into();
        let backbone = BackboneConfig::small(32);
        let cfg = tiny_cfg(1, 11);
        let mut ca = build_classifier(&backbone, 5, 11, None).unwrap();
        let ra = cross_domain(&mut ca, &source, target, &cfg, 11, "h", "random").unwrap();
        let mut cb = build_classifier(&backbone, 5, 11, None).unwrap();
        let rb = finetune(&mut cb, &[&source], target, Method::Erm, &cfg, 11, "h", "random").unwrap();
        let mut pa = Vec::new();
        ca.extractor.net.visit_params(&mut |n, p| pa.push((n, p.value.clone())));
        let mut pb = Vec::new();
        cb.extractor.net.visit_params(&mut |n, p| pb.push((n, p.value.clone())));
        for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(ra.target_acc, rb.target_acc);
    }

    #[test]
    fn irm_refuses_single_source() {
        let ds = synth_domains(7, &classes(), 2, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let mut c = build_classifier(&backbone, 5, 0, None).unwrap();
        let err = irm_finetune(&mut c, &[&ds[0]], &ds[1], &tiny_cfg(1, 0), 0, "h", "random").unwrap_err();
        assert!(err.to_string().contains("2 source domains"), "{err}");
    }

    #[test]
    fn sweep_rows_average_and_order_independence() {
        let ds = synth_domains(8, &classes(), 2, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let cfg = tiny_cfg(1, 0);
        let a = leave_one_out_sweep(&ds, Method::Erm, &backbone, None, "random", &cfg, 1).unwrap();
        assert_eq!(a.rows.len(), 4);
        let mean = a.rows.iter().map(|r| r.best_target_acc).sum::<f64>() / 4.0;
        assert!((a.average_best - mean).abs() < 1e-9);
        // permuted domain list: same accuracies per target
        let mut rev = ds.clone();
        rev.reverse();
        let b = leave_one_out_sweep(&rev, Method::Erm, &backbone, None, "random", &cfg, 1).unwrap();
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.best_target_acc, y.best_target_acc);
        }
    }

    #[test]
    fn sweep_files_written() {
        let ds = synth_domains(9, &classes()[..2].to_vec(), 3, 32).unwrap();
        let backbone = BackboneConfig::small(32);
        let cfg = tiny_cfg(1, 0);
        let sweep = leave_one_out_sweep(&ds, Method::Erm, &backbone, None, "random", &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sweep(dir.path(), &sweep).unwrap();
        let csv_text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv_text.lines().count(), 1 + 4 + 1);
        assert!(csv_text.lines().last().unwrap().starts_with("average,"));
        let json: SweepResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
        assert_eq!(json.rows.len(), 4);
    }

    #[test]
    fn mismatched_classes_rejected() {
        let ds = synth_domains(1, &classes(), 2, 32).unwrap();
        let mut odd = ds[0].clone();
        odd.name = "odd".into();
        odd.class_names[0] = "blob".into();
        let backbone = BackboneConfig::small(32);
        let mut c = build_classifier(&backbone, 5, 0, None).unwrap();
        assert!(erm_finetune(&mut c, &[&odd], &ds[1], &tiny_cfg(1, 0), 0, "h", "random").is_err());
    }
}
