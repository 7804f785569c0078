//! Self-supervised pretraining: SGD with momentum/weight decay/step schedule,
//! the averaged multi-task loop over normalized losses, the sequential
//! (train-then-drop) schedule, and the per-epoch cluster reassignment cycle.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::{collect_named, save_checkpoint};
use crate::error::{Error, Result};
use crate::gabor::{make_target, reconstruction_loss, reconstruction_loss_grad, BinaryTargetMap, GaborBankConfig};
use crate::nets::{build_backbone, build_decoder, build_head, reinit_head, BackboneConfig, FeatureExtractor, HeadKind, TaskHead};
use crate::nn::loss::{argmax_accuracy, cross_entropy, softmax};
use crate::nn::{derive_rng, Sequential};
use crate::pretext::{deepcluster_batch, expand_rotations, reassign_pseudolabels};

pub const EMA_DECAY: f64 = 0.99;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-5,
            lr_decay_factor: 0.1,
            lr_step_epochs: 10,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Step schedule: lr · factor^⌊epoch / step⌋.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_step_epochs.max(1)) as i32)
    }
}

/// One SGD-with-momentum step on a single tensor.
/// v ← μ·v + (g + wd·p); p ← p − lr·v.
pub fn sgd_update(param: &mut ArrayD<f64>, grad: &ArrayD<f64>, slot: &mut ArrayD<f64>, lr: f64, config: &OptimConfig) {
    ndarray::Zip::from(param).and(grad).and(slot).for_each(|p, &g, v| {
        *v = config.momentum * *v + (g + config.weight_decay * *p);
        *p -= lr * *v;
    });
}

/// SGD optimizer; momentum slots are keyed by scoped parameter name so one
/// optimizer can serve the extractor and every head.
pub struct Sgd {
    pub config: OptimConfig,
    slots: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(config: OptimConfig) -> Self {
        Sgd { config, slots: HashMap::new() }
    }

    /// Applies one update to every parameter of `net`, scoped by `prefix`.
    /// A non-finite gradient aborts, naming the offending tensor.
    pub fn step_net(&mut self, prefix: &str, net: &mut Sequential, lr: f64) -> Result<()> {
        let mut bad = None;
        let config = self.config.clone();
        let slots = &mut self.slots;
        net.visit_params(&mut |name, p| {
            if bad.is_some() {
                return;
            }
            if !p.grad.iter().all(|v| v.is_finite()) {
                bad = Some(format!("{prefix}.{name}"));
                return;
            }
            let slot = slots
                .entry(format!("{prefix}.{name}"))
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            sgd_update(&mut p.value, &p.grad, slot, lr, &config);
        });
        match bad {
            Some(name) => Err(Error::Numerical(format!("non-finite gradient in {name}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    R,
    G,
    Dc,
}

impl TaskId {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::R => "r",
            TaskId::G => "g",
            TaskId::Dc => "dc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" => Ok(TaskId::R),
            "g" => Ok(TaskId::G),
            "dc" => Ok(TaskId::Dc),
            other => Err(Error::config("tasks", format!("unknown task {other:?} (expected r, g, dc)"))),
        }
    }
}

/// One pretext task: its head plus the detached running mean of its raw loss
/// used to normalize losses in the averaged multi-task objective.
pub struct TaskSpec {
    pub id: TaskId,
    pub head: TaskHead,
    pub ema: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub task_id: &'static str,
    pub raw_loss: f64,
    pub normalized_loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["step", "epoch", "task_id", "raw_loss", "normalized_loss", "lr"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.task_id.to_string(),
            format!("{:.17e}", r.raw_loss),
            format!("{:.17e}", r.normalized_loss),
            format!("{:.17e}", r.lr),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Shared-encoder training state across pretext tasks.
pub struct TrainState {
    pub extractor: FeatureExtractor,
    pub tasks: Vec<TaskSpec>,
    pub optim: Sgd,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub loss_log: Vec<LossRecord>,
    /// Pseudo-labels for the clustering task, refreshed each active epoch.
    pub pseudo_labels: Vec<usize>,
}

impl TrainState {
    pub fn task_index(&self, id: TaskId) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }

    pub fn named_tensors(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = collect_named("extractor", &mut self.extractor.net);
        for i in 0..self.tasks.len() {
            let prefix = format!("head_{}", self.tasks[i].id.as_str());
            out.extend(collect_named(&prefix, &mut self.tasks[i].head.net));
        }
        out
    }
}

/// Everything a pretraining epoch needs besides the model: the unlabeled
/// image pool and precomputed filter-response reconstruction targets.
pub struct PretrainPool<'a> {
    pub train: &'a Array4<f64>,
    pub val: &'a Array4<f64>,
    pub gabor_train: &'a [BinaryTargetMap],
    pub gabor_val: &'a [BinaryTargetMap],
    pub cluster_k: usize,
}

/// Precomputes the binary reconstruction target of every image in parallel.
pub fn precompute_gabor_targets(images: &Array4<f64>, cfg: &GaborBankConfig) -> Result<Vec<BinaryTargetMap>> {
    let views: Vec<_> = images.outer_iter().collect();
    views
        .par_iter()
        .map(|img| make_target(&img.to_owned(), cfg))
        .collect()
}

struct BatchOutcome {
    raw: f64,
    normalized: f64,
    /// cotangent to feed the shared extractor, already scaled for the
    /// normalized-mean objective
    rep_grad: Array2<f64>,
}

/// Forward + head-backward for one task on one batch. The head accumulates
/// the gradient of its own raw loss; the returned extractor cotangent is
/// scaled by 1/(K·(ema+eps)) so summing over tasks yields the gradient of the
/// mean of normalized losses.
fn task_batch(
    state: &mut TrainState,
    task_idx: usize,
    batch: &Array4<f64>,
    batch_indices: &[usize],
    pool: &PretrainPool,
    n_active: usize,
) -> Result<BatchOutcome> {
    let id = state.tasks[task_idx].id;
    let (raw, rep_grad_raw): (f64, Array2<f64>);
    match id {
        TaskId::R => {
            let rb = expand_rotations(batch)?;
            let rep = state.extractor.forward(&rb.images, true);
            let logits = state.tasks[task_idx].head.forward(&rep, true);
            let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (loss, grad) = cross_entropy(&logits2, &rb.labels);
            raw = loss;
            rep_grad_raw = state.tasks[task_idx].head.backward(grad.into_dyn());
        }
        TaskId::G => {
            let rep = state.extractor.forward(batch, true);
            let pred = state.tasks[task_idx].head.forward(&rep, true);
            let pred4 = pred.into_dimensionality::<ndarray::Ix4>().unwrap();
            let b = pred4.dim().0;
            let mut total = 0.0;
            let mut grad = Array4::zeros(pred4.raw_dim());
            for (i, &pi) in batch_indices.iter().enumerate() {
                let target = &pool.gabor_train[pi];
                let p2 = pred4.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned();
                total += reconstruction_loss(&p2, target)?;
                let g = reconstruction_loss_grad(&p2, target)?;
                grad.slice_mut(ndarray::s![i, 0, .., ..]).assign(&(g / b as f64));
            }
            raw = total / b as f64;
            rep_grad_raw = state.tasks[task_idx].head.backward(grad.into_dyn());
        }
        TaskId::Dc => {
            let dc = deepcluster_batch(batch)?;
            let labels: Vec<usize> = batch_indices.iter().map(|&i| state.pseudo_labels[i]).collect();
            let rep = state.extractor.forward(&dc, true);
            let logits = state.tasks[task_idx].head.forward(&rep, true);
            let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (loss, grad) = cross_entropy(&logits2, &labels);
            raw = loss;
            rep_grad_raw = state.tasks[task_idx].head.backward(grad.into_dyn());
        }
    }
    if !raw.is_finite() {
        return Err(Error::Numerical(format!("task {} produced a non-finite loss", id.as_str())));
    }

    // detached normalizer: update the running mean first, then normalize
    let ema = match state.tasks[task_idx].ema {
        None => raw,
        Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * raw,
    };
    state.tasks[task_idx].ema = Some(ema);
    let scale = 1.0 / (n_active as f64 * (ema + NORM_EPS));
    Ok(BatchOutcome { raw, normalized: raw / (ema + NORM_EPS), rep_grad: rep_grad_raw * scale })
}

/// One epoch of the averaged multi-task loop over `active` tasks: per batch,
/// every task computes its raw loss; the extractor steps on the mean of
/// normalized-loss gradients while each head steps on its own raw loss.
pub fn multitask_epoch_avg(state: &mut TrainState, pool: &PretrainPool, active: &[TaskId]) -> Result<()> {
    if active.is_empty() {
        return Err(Error::config("tasks", "at least one active task required"));
    }
    let active_idx: Vec<usize> = active
        .iter()
        .map(|id| {
            state
                .task_index(*id)
                .ok_or_else(|| Error::config("tasks", format!("task {} not part of this run", id.as_str())))
        })
        .collect::<Result<_>>()?;

    if active.contains(&TaskId::Dc) {
        refresh_pseudolabels(state, pool)?;
    }

    let n = pool.train.dim().0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(state.optim.config.seed, &format!("order/{}", state.epoch));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let lr = state.optim.config.lr_at(state.epoch);
    let batch_size = state.optim.config.batch_size;
    let k = active_idx.len();

    for chunk in order.chunks(batch_size) {
        let (batch, _) = gather_images(pool.train, chunk);
        state.extractor.net.zero_grads();
        for &ti in &active_idx {
            state.tasks[ti].head.net.zero_grads();
        }
        let mut records = Vec::with_capacity(k);
        for &ti in &active_idx {
            // each task forwards its own transformed view through the shared
            // extractor, so its cotangent must flow back before the next
            // task's forward replaces the cached activations; extractor
            // parameter gradients accumulate across tasks
            let out = task_batch(state, ti, &batch, chunk, pool, k)?;
            records.push((state.tasks[ti].id, out.raw, out.normalized));
            state.extractor.backward(out.rep_grad);
        }
        state.step += 1;
        for (id, raw, normalized) in records {
            state.loss_log.push(LossRecord {
                step: state.step,
                epoch: state.epoch,
                task_id: id.as_str(),
                raw_loss: raw,
                normalized_loss: normalized,
                lr,
            });
        }
        state.optim.step_net("extractor", &mut state.extractor.net, lr)?;
        for &ti in &active_idx {
            let prefix = format!("head_{}", state.tasks[ti].id.as_str());
            let mut head = std::mem::replace(&mut state.tasks[ti].head.net, Sequential::new());
            let r = state.optim.step_net(&prefix, &mut head, lr);
            state.tasks[ti].head.net = head;
            r?;
        }
    }
    state.epoch += 1;
    Ok(())
}

fn gather_images(pool: &Array4<f64>, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
    let (_, c, h, w) = pool.dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), k).assign(&pool.index_axis(Axis(0), i));
    }
    (out, idx.to_vec())
}

fn refresh_pseudolabels(state: &mut TrainState, pool: &PretrainPool) -> Result<()> {
    let ti = state
        .task_index(TaskId::Dc)
        .ok_or_else(|| Error::config("tasks", "clustering task not configured"))?;
    if pool.cluster_k < 2 {
        return Err(Error::config("cluster_k", "at least 2 clusters required"));
    }
    let cluster_seed = state.seed.wrapping_add(state.epoch as u64);
    let pca_dim = if state.extractor.rep_dim > 256 { Some(256) } else { None };
    let (labels, _) = reassign_pseudolabels(&mut state.extractor, pool.train, pool.cluster_k, cluster_seed, pca_dim)?;
    state.pseudo_labels = labels;
    reinit_head(&mut state.tasks[ti].head, cluster_seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    Ok(())
}

/// Held-out rotation-prediction accuracy, eval mode, chunked.
pub fn rotation_accuracy(state: &mut TrainState, images: &Array4<f64>) -> Result<f64> {
    let ti = state
        .task_index(TaskId::R)
        .ok_or_else(|| Error::config("tasks", "rotation task not configured"))?;
    let rb = expand_rotations(images)?;
    let n = rb.images.dim().0;
    let mut correct = 0.0;
    let mut total = 0.0;
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let chunk = rb.images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let rep = state.extractor.forward(&chunk, false);
        let logits = state.tasks[ti].head.forward(&rep, false);
        let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
        correct += argmax_accuracy(&logits2, &rb.labels[start..end]) * (end - start) as f64;
        total += (end - start) as f64;
    }
    Ok(correct / total)
}

/// Mean raw loss of the given tasks over the validation pool (eval mode);
/// negated it serves as the stage-convergence metric.
pub fn validation_loss(state: &mut TrainState, pool: &PretrainPool, tasks: &[TaskId]) -> Result<f64> {
    let n = pool.val.dim().0;
    let mut total = 0.0;
    for &id in tasks {
        let ti = state.task_index(id).unwrap();
        let mut task_total = 0.0;
        let mut count = 0.0;
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (batch, _) = gather_images(pool.val, &idx);
            let loss = match id {
                TaskId::R => {
                    let rb = expand_rotations(&batch)?;
                    let rep = state.extractor.forward(&rb.images, false);
                    let logits = state.tasks[ti].head.forward(&rep, false);
                    let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
                    cross_entropy(&logits2, &rb.labels).0
                }
                TaskId::G => {
                    let rep = state.extractor.forward(&batch, false);
                    let pred = state.tasks[ti].head.forward(&rep, false);
                    let pred4 = pred.into_dimensionality::<ndarray::Ix4>().unwrap();
                    let b = pred4.dim().0;
                    let mut acc = 0.0;
                    for (i, &pi) in idx.iter().enumerate() {
                        let p2 = pred4.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned();
                        acc += reconstruction_loss(&p2, &pool.gabor_val[pi])?;
                    }
                    acc / b as f64
                }
                // pseudo-labels are train-pool specific; evaluate the
                // clustering stage on its own training objective instead
                TaskId::Dc => {
                    let dc = deepcluster_batch(&batch)?;
                    let rep = state.extractor.forward(&dc, false);
                    let logits = state.tasks[ti].head.forward(&rep, false);
                    let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
                    let p = softmax(&logits2);
                    // entropy of predictions as a label-free progress proxy
                    -p.mapv(|v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum() / (end - start) as f64
                }
            };
            task_total += loss * (end - start) as f64;
            count += (end - start) as f64;
        }
        total += task_total / count;
    }
    Ok(total / tasks.len() as f64)
}

/// Trains each stage until its validation metric stops improving for
/// `patience` epochs (or the stage budget runs out), then drops the stage's
/// tasks and advances.
pub fn sequential_schedule(
    state: &mut TrainState,
    pool: &PretrainPool,
    stages: &[Vec<TaskId>],
    patience: usize,
    stage_budget: usize,
) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::config("stages", "schedule needs at least one stage"));
    }
    for stage in stages {
        if stage.is_empty() {
            return Err(Error::config("stages", "empty stage in schedule"));
        }
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        for _ in 0..stage_budget {
            multitask_epoch_avg(state, pool, stage)?;
            let metric = validation_loss(state, pool, stage)?;
            if metric < best - 1e-9 {
                best = metric;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Clustering-task pretraining: each epoch re-clusters features, re-draws the
/// head's final layer, and runs one cross-entropy epoch on edge-map inputs.
pub fn deepcluster_train(state: &mut TrainState, pool: &PretrainPool, epochs: usize) -> Result<()> {
    for _ in 0..epochs {
        multitask_epoch_avg(state, pool, &[TaskId::Dc])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Avg,
    Ft,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avg" => Ok(Strategy::Avg),
            "ft" => Ok(Strategy::Ft),
            other => Err(Error::config("strategy", format!("unknown strategy {other:?} (expected avg or ft)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub tasks: Vec<TaskId>,
    pub strategy: Strategy,
    pub cluster_k: usize,
    pub gabor: GaborBankConfig,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            optim: OptimConfig::default(),
            tasks: vec![TaskId::R],
            strategy: Strategy::Avg,
            cluster_k: 32,
            gabor: GaborBankConfig::default(),
            patience: 3,
        }
    }
}

pub struct PretrainOutcome {
    pub state: TrainState,
    /// per-epoch held-out rotation accuracy, when the rotation task is active
    pub rotation_val_accuracy: Vec<f64>,
}

/// Builds the model for a pretraining run (shared extractor + one head per
/// task, all seeded from the run seed).
pub fn build_train_state(backbone: &BackboneConfig, cfg: &PretrainConfig) -> Result<TrainState> {
    if cfg.tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task required"));
    }
    let mut seen = Vec::new();
    for t in &cfg.tasks {
        if seen.contains(t) {
            return Err(Error::config("tasks", format!("task {} listed twice", t.as_str())));
        }
        seen.push(*t);
    }
    let seed = cfg.optim.seed;
    let extractor = build_backbone(backbone, seed)?;
    let rep_dim = extractor.rep_dim;
    let mut tasks = Vec::new();
    for (i, id) in cfg.tasks.iter().enumerate() {
        let head_seed = seed.wrapping_add(1000 + i as u64);
        let head = match id {
            TaskId::R => build_head(HeadKind::Rotation, rep_dim, 4, head_seed)?,
            TaskId::G => build_decoder(backbone, head_seed)?,
            TaskId::Dc => build_head(HeadKind::Cluster, rep_dim, cfg.cluster_k, head_seed)?,
        };
        tasks.push(TaskSpec { id: *id, head, ema: None });
    }
    Ok(TrainState {
        extractor,
        tasks,
        optim: Sgd::new(cfg.optim.clone()),
        epoch: 0,
        step: 0,
        seed,
        loss_log: Vec::new(),
        pseudo_labels: Vec::new(),
    })
}

/// The sequential composition: the clustering task first (if present), then
/// one averaged stage over the remaining tasks.
pub fn ft_stages(tasks: &[TaskId]) -> Vec<Vec<TaskId>> {
    let mut stages = Vec::new();
    if tasks.contains(&TaskId::Dc) {
        stages.push(vec![TaskId::Dc]);
    }
    let rest: Vec<TaskId> = tasks.iter().copied().filter(|t| *t != TaskId::Dc).collect();
    if !rest.is_empty() {
        stages.push(rest);
    }
    stages
}

/// Full pretraining driver. Writes per-epoch checkpoints, a final
/// checkpoint, and the per-step loss CSV when `out_dir` is given.
pub fn pretrain(
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
    train: &Array4<f64>,
    val: &Array4<f64>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let needs_gabor = cfg.tasks.contains(&TaskId::G);
    let gabor_train = if needs_gabor { precompute_gabor_targets(train, &cfg.gabor)? } else { Vec::new() };
    let gabor_val = if needs_gabor { precompute_gabor_targets(val, &cfg.gabor)? } else { Vec::new() };
    let pool = PretrainPool {
        train,
        val,
        gabor_train: &gabor_train,
        gabor_val: &gabor_val,
        cluster_k: cfg.cluster_k,
    };
    let mut state = build_train_state(backbone, cfg)?;
    let mut rotation_val_accuracy = Vec::new();
    let track_rotation = cfg.tasks.contains(&TaskId::R);

    let after_epoch = |state: &mut TrainState, accs: &mut Vec<f64>| -> Result<()> {
        if track_rotation {
            accs.push(rotation_accuracy(state, val)?);
        }
        if let Some(dir) = out_dir {
            write_state_checkpoint(state, backbone, cfg, &dir.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
        }
        Ok(())
    };

    match cfg.strategy {
        Strategy::Avg => {
            for _ in 0..cfg.optim.epochs {
                multitask_epoch_avg(&mut state, &pool, &cfg.tasks)?;
                after_epoch(&mut state, &mut rotation_val_accuracy)?;
            }
        }
        Strategy::Ft => {
            let stages = ft_stages(&cfg.tasks);
            for stage in &stages {
                let mut best = f64::INFINITY;
                let mut since_best = 0;
                for _ in 0..cfg.optim.epochs {
                    multitask_epoch_avg(&mut state, &pool, stage)?;
                    after_epoch(&mut state, &mut rotation_val_accuracy)?;
                    let metric = validation_loss(&mut state, &pool, stage)?;
                    if metric < best - 1e-9 {
                        best = metric;
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.patience {
                            break;
                        }
                    }
                }
                if let Some(dir) = out_dir {
                    let names: Vec<&str> = stage.iter().map(|t| t.as_str()).collect();
                    write_state_checkpoint(
                        &mut state,
                        backbone,
                        cfg,
                        &dir.join(format!("stage_{}.ckpt", names.join("_"))),
                    )?;
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        write_state_checkpoint(&mut state, backbone, cfg, &dir.join("final.ckpt"))?;
        write_loss_csv(dir.join("loss.csv"), &state.loss_log)?;
    }
    Ok(PretrainOutcome { state, rotation_val_accuracy })
}

pub fn write_state_checkpoint(
    state: &mut TrainState,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
    path: &Path,
) -> Result<()> {
    let tensors = state.named_tensors();
    let meta = serde_json::json!({
        "backbone": backbone,
        "tasks": cfg.tasks,
        "strategy": cfg.strategy,
        "epoch": state.epoch,
        "seed": state.seed,
    });
    save_checkpoint(path, &tensors, &meta)
}
