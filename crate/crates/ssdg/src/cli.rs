//! Command-line entry point: corpus synthesis, pretraining, fine-tuning,
//! sweeps, heatmap rendering, and target-map previews, all driven by a JSON
//! config with flag overrides.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ckpt::{assign_named, collect_named, load_checkpoint, save_checkpoint};
use crate::data::{load_domain_tree, save_domain_tree, synth_domains, DomainDataset, SYNTH_CLASSES};
use crate::dg::{
    build_classifier, finetune, leave_one_out_sweep_jobs, steps_per_epoch, write_finetune_loss_csv, write_sweep,
    FinetuneConfig, Method,
};
use crate::error::{Error, Result};
use crate::explain::{gradcam, render_overlay};
use crate::gabor::{make_target, GaborBankConfig};
use crate::nets::BackboneConfig;
use crate::trainer::{pretrain, PretrainConfig, Strategy, TaskId};

/// Full run configuration; the JSON config file mirrors this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::small(64),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).unwrap());
        format!("{:x}", hasher.finalize())[..16].to_string()
    }

    /// Writes the effective settings (after flag overrides) next to the run
    /// outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut v = serde_json::to_value(self)?;
        v["config_hash"] = serde_json::Value::String(self.hash());
        std::fs::write(dir.join("config.resolved.json"), serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }
}

#[derive(Parser)]
#[command(name = "ssdg", version, about = "Multi-task self-supervised pretraining and domain-generalization evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic four-style shape corpus
    Synth(SynthArgs),
    /// Self-supervised pretraining on an unlabeled image pool
    Pretrain(PretrainArgs),
    /// Fine-tune on source domains, evaluate on a held-out target
    Finetune(FinetuneArgs),
    /// Leave-one-domain-out sweep over all targets
    Sweep(SweepArgs),
    /// Render class-activation overlays for a fine-tuned model
    Gradcam(GradcamArgs),
    /// Write the binary filter-response target of one image as a PNG
    GaborPreview(GaborPreviewArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (root of the domain/class tree)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per class per domain
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// Domain-tree data directory
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated task list, e.g. r,g,dc
    #[arg(long, default_value = "r")]
    tasks: String,
    #[arg(long, default_value = "avg")]
    strategy: String,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoints + loss.csv)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    cluster_k: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out target domain name
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "erm")]
    method: String,
    /// `random` or a checkpoint path with pretrained extractor tensors
    #[arg(long, default_value = "random")]
    init: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (result.json, loss.csv, model.ckpt)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "erm")]
    method: String,
    #[arg(long, default_value = "random")]
    init: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (results.csv, results.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel held-out-target runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcamArgs {
    /// Fine-tuned model checkpoint (from `finetune`)
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Domain whose images to explain
    #[arg(long)]
    domain: String,
    /// Restrict to one class name
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Tapped extractor layer
    #[arg(long, default_value = "pool3")]
    layer: String,
    /// Number of images to render
    #[arg(long, default_value_t = 8)]
    count: usize,
}

#[derive(Args)]
struct GaborPreviewArgs {
    #[arg(long)]
    image: PathBuf,
    /// JSON file holding a filter-bank config (defaults used when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output PNG path
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv, dispatches, and maps outcomes to the exit-code contract:
/// 0 success, 1 usage, 2 data/validation, 3 numerical abort.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Gradcam(a) => cmd_gradcam(a),
        Cmd::GaborPreview(a) => cmd_gabor_preview(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(a.seed, &classes, a.n, a.size)?;
    save_domain_tree(&a.out, &domains)?;
    let resolved = serde_json::json!({
        "command": "synth", "seed": a.seed, "n_per_class": a.n, "size": a.size,
        "classes": classes, "domains": domains.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
    });
    std::fs::write(a.out.join("config.resolved.json"), serde_json::to_string_pretty(&resolved)?)?;
    println!(
        "wrote {} domains x {} images to {}",
        domains.len(),
        domains[0].len(),
        a.out.display()
    );
    Ok(())
}

fn parse_tasks(s: &str) -> Result<Vec<TaskId>> {
    s.split(',').filter(|t| !t.is_empty()).map(TaskId::parse).collect()
}

/// Stacks the train (respectively val) split images of every domain into one
/// unlabeled pool.
fn split_pools(domains: &[DomainDataset]) -> (Array4<f64>, Array4<f64>) {
    let (_, c, h, w) = domains[0].images.dim();
    let n_train: usize = domains.iter().map(|d| d.train_idx.len()).sum();
    let n_val: usize = domains.iter().map(|d| d.val_idx.len()).sum();
    let mut train = Array4::zeros((n_train, c, h, w));
    let mut val = Array4::zeros((n_val, c, h, w));
    let (mut ti, mut vi) = (0, 0);
    for d in domains {
        for &i in &d.train_idx {
            train.index_axis_mut(Axis(0), ti).assign(&d.images.index_axis(Axis(0), i));
            ti += 1;
        }
        for &i in &d.val_idx {
            val.index_axis_mut(Axis(0), vi).assign(&d.images.index_axis(Axis(0), i));
            vi += 1;
        }
    }
    (train, val)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.pretrain.tasks = parse_tasks(&a.tasks)?;
    cfg.pretrain.strategy = Strategy::parse(&a.strategy)?;
    if let Some(s) = a.seed {
        cfg.pretrain.optim.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.optim.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.pretrain.optim.batch_size = b;
    }
    if let Some(k) = a.cluster_k {
        cfg.pretrain.cluster_k = k;
    }
    cfg.write_resolved(&a.out)?;

    let domains = load_domain_tree(&a.data, cfg.backbone.input_size, cfg.pretrain.optim.seed)?;
    let (train, val) = split_pools(&domains);
    let outcome = pretrain(&cfg.backbone, &cfg.pretrain, &train, &val, Some(&a.out))?;
    if !outcome.rotation_val_accuracy.is_empty() {
        let mut w = csv::Writer::from_path(a.out.join("rotation_accuracy.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["epoch", "accuracy"]).map_err(|e| Error::Data(e.to_string()))?;
        for (i, acc) in outcome.rotation_val_accuracy.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{acc:.6}")])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        println!(
            "final rotation accuracy: {:.4}",
            outcome.rotation_val_accuracy.last().unwrap()
        );
    }
    println!("checkpoint: {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn load_init(init: &str) -> Result<Option<BTreeMap<String, ArrayD<f64>>>> {
    if init == "random" {
        Ok(None)
    } else {
        let (tensors, _) = load_checkpoint(init)?;
        Ok(Some(tensors))
    }
}

fn init_label(init: &str) -> String {
    if init == "random" { "random".to_string() } else { format!("ssl:{init}") }
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.finetune.optim.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.optim.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.finetune.optim.batch_size = b;
    }
    let method = Method::parse(&a.method)?;
    cfg.write_resolved(&a.out)?;

    let seed = cfg.finetune.optim.seed;
    let domains = load_domain_tree(&a.data, cfg.backbone.input_size, seed)?;
    let target = domains
        .iter()
        .find(|d| d.name == a.target)
        .ok_or_else(|| Error::Data(format!("no domain named {:?} under {}", a.target, a.data.display())))?
        .clone();
    let sources: Vec<&DomainDataset> = domains.iter().filter(|d| d.name != a.target).collect();
    let init = load_init(&a.init)?;
    let n_classes = target.class_names.len();
    let mut classifier = build_classifier(&cfg.backbone, n_classes, seed, init.as_ref())?;
    let result = finetune(
        &mut classifier,
        &sources,
        &target,
        method,
        &cfg.finetune,
        seed,
        &cfg.hash(),
        &init_label(&a.init),
    )?;

    std::fs::write(a.out.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    write_finetune_loss_csv(
        a.out.join("loss.csv"),
        &result,
        steps_per_epoch(&sources, cfg.finetune.optim.batch_size),
    )?;
    let mut tensors = collect_named("extractor", &mut classifier.extractor.net);
    tensors.extend(collect_named("head", &mut classifier.head.net));
    let meta = serde_json::json!({
        "backbone": cfg.backbone,
        "class_names": target.class_names,
        "method": method,
        "target": target.name,
        "seed": seed,
    });
    save_checkpoint(a.out.join("model.ckpt"), &tensors, &meta)?;
    println!(
        "target {}: best accuracy {:.4} (source-selected {:.4})",
        result.target, result.best_target_acc, result.target_acc_at_best_source_val
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.finetune.optim.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.optim.epochs = e;
    }
    let method = Method::parse(&a.method)?;
    cfg.write_resolved(&a.out)?;

    let seed = cfg.finetune.optim.seed;
    let domains = load_domain_tree(&a.data, cfg.backbone.input_size, seed)?;
    let init = load_init(&a.init)?;
    let sweep = leave_one_out_sweep_jobs(
        &domains,
        method,
        &cfg.backbone,
        init.as_ref(),
        &init_label(&a.init),
        &cfg.finetune,
        seed,
        a.jobs.max(1),
    )?;
    write_sweep(&a.out, &sweep)?;
    for r in &sweep.rows {
        println!("target {}: best {:.4}", r.target, r.best_target_acc);
    }
    println!("average best accuracy: {:.4}", sweep.average_best);
    Ok(())
}

fn cmd_gradcam(a: GradcamArgs) -> Result<()> {
    let (tensors, meta) = load_checkpoint(&a.ckpt)?;
    let backbone: BackboneConfig = serde_json::from_value(meta["backbone"].clone())
        .map_err(|_| Error::Checkpoint("checkpoint lacks backbone metadata".into()))?;
    let class_names: Vec<String> = serde_json::from_value(meta["class_names"].clone())
        .map_err(|_| Error::Checkpoint("checkpoint lacks class names; use one saved by finetune".into()))?;
    let mut classifier = build_classifier(&backbone, class_names.len(), 0, None)?;
    assign_named("extractor", &mut classifier.extractor.net, &tensors)?;
    assign_named("head", &mut classifier.head.net, &tensors)?;

    let domains = load_domain_tree(&a.data, backbone.input_size, 0)?;
    let domain = domains
        .iter()
        .find(|d| d.name == a.domain)
        .ok_or_else(|| Error::Data(format!("no domain named {:?}", a.domain)))?;
    let class_filter = match &a.class {
        None => None,
        Some(name) => Some(
            domain
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Data(format!("no class named {name:?}")))?,
        ),
    };
    std::fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for i in 0..domain.len() {
        if written >= a.count {
            break;
        }
        if let Some(cf) = class_filter {
            if domain.labels[i] != cf {
                continue;
            }
        }
        let img = domain.image(i);
        let x = img.clone().insert_axis(Axis(0));
        let logits = classifier.logits(&x, false);
        let pred = logits
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        let hm = gradcam(&mut classifier, &img, pred, &a.layer)?;
        let overlay = render_overlay(&img, &hm, 0.5);
        let name = format!(
            "{}_{:04}_pred-{}_true-{}.png",
            domain.name, i, domain.class_names[pred], domain.class_names[domain.labels[i]]
        );
        save_rgb_png(&a.out.join(name), &overlay)?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Data("no matching images to render".into()));
    }
    println!("wrote {written} overlays to {}", a.out.display());
    Ok(())
}

fn cmd_gabor_preview(a: GaborPreviewArgs) -> Result<()> {
    let gabor: GaborBankConfig = match &a.config {
        None => GaborBankConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Data(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad config {}: {e}", p.display())))?
        }
    };
    let img = load_rgb(&a.image)?;
    let target = make_target(&img, &gabor)?;
    let (h, w) = (target.height(), target.width());
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = if target.values[(y as usize, x as usize)] == 1 { 255 } else { 0 };
    }
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    out.save(&a.out).map_err(|e| Error::Data(format!("cannot write {}: {e}", a.out.display())))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Decodes an image file as RGB in [0,1] at its native size.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut arr = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(arr)
}

pub fn save_rgb_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (img[(c, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

#[allow(unused)]
fn gray_to_png(map: &Array2<u8>) -> image::GrayImage {
    let (h, w) = map.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = map[(y as usize, x as usize)];
    }
    out
}
