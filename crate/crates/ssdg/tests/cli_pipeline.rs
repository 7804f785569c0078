//! End-to-end runs of the compiled binary: corpus synthesis, pretraining,
//! fine-tuning, sweeping, heatmaps, and the exit-code contract.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssdg"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "backbone": { "variant": "small", "first_block_filters": 32, "input_size": 32, "batch_norm": true },
        "pretrain": {
            "optim": { "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-5, "lr_decay_factor": 0.1,
                       "lr_step_epochs": 10, "epochs": 1, "batch_size": 8, "seed": 3 },
            "tasks": ["r"], "strategy": "avg", "cluster_k": 4,
            "gabor": {}, "patience": 3
        },
        "finetune": {
            "optim": { "lr": 0.001, "momentum": 0.9, "weight_decay": 5e-5, "lr_decay_factor": 0.1,
                       "lr_step_epochs": 10, "epochs": 1, "batch_size": 8, "seed": 3 },
            "irm_penalty_weight": 1e4, "irm_warmup_frac": 0.1
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = bin()
        .args(["synth", "--out", data.to_str().unwrap(), "--seed", "1", "--n", "3", "--size", "32"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());

    // corpus layout
    for d in ["photo", "painting", "cartoon", "sketch"] {
        assert!(data.join(d).join("circle").join("0000.png").exists());
    }
    assert!(data.join("config.resolved.json").exists());

    // pretrain: checkpoint exists, loss CSV non-empty, rotation accuracy logged
    let pre = tmp.path().join("pre");
    let out = bin()
        .args([
            "pretrain", "--data", data.to_str().unwrap(), "--tasks", "r", "--strategy", "avg",
            "--config", cfg.to_str().unwrap(), "--out", pre.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pre.join("final.ckpt").exists());
    let loss = std::fs::read_to_string(pre.join("loss.csv")).unwrap();
    assert!(loss.lines().count() > 1, "loss csv is empty");
    assert!(loss.starts_with("step,epoch,task_id,raw_loss,normalized_loss,lr"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final rotation accuracy"), "{stdout}");
    assert!(pre.join("config.resolved.json").exists());

    // finetune with the pretrained init
    let ft = tmp.path().join("ft");
    let out = bin()
        .args([
            "finetune", "--data", data.to_str().unwrap(), "--target", "sketch", "--method", "erm",
            "--init", pre.join("final.ckpt").to_str().unwrap(),
            "--config", cfg.to_str().unwrap(), "--out", ft.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ft.join("result.json").exists());
    assert!(ft.join("loss.csv").exists());
    assert!(ft.join("model.ckpt").exists());

    // gradcam on the fine-tuned model
    let cam = tmp.path().join("cam");
    let out = bin()
        .args([
            "gradcam", "--ckpt", ft.join("model.ckpt").to_str().unwrap(),
            "--data", data.to_str().unwrap(), "--domain", "sketch",
            "--out", cam.to_str().unwrap(), "--count", "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pngs: Vec<_> = std::fs::read_dir(&cam)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    assert_eq!(pngs.len(), 3);

    // gabor preview of one corpus image
    let preview = tmp.path().join("preview.png");
    let out = bin()
        .args([
            "gabor-preview", "--image", data.join("photo/circle/0000.png").to_str().unwrap(),
            "--out", preview.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&preview).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (32, 32));
    assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[test]
fn sweep_rows_and_average_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = bin()
        .args([
            "sweep", "--data", data.to_str().unwrap(), "--method", "erm",
            "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
            "--jobs", "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 4 + 1, "{text}");
    let parse = |line: &str| -> f64 { line.split(',').nth(4).unwrap().parse().unwrap() };
    let mean: f64 = rows[1..5].iter().map(|r| parse(r)).sum::<f64>() / 4.0;
    let avg = parse(rows[5]);
    assert!((mean - avg).abs() < 1e-9, "{mean} vs {avg}");
}

#[test]
fn pretrain_loss_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("pre{run}"));
        let out = bin()
            .args([
                "pretrain", "--data", data.to_str().unwrap(), "--tasks", "r,g",
                "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
                "--seed", "5",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read_to_string(out_dir.join("loss.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "pretraining loss log is not reproducible");
}

#[test]
fn finetune_loss_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("ft{run}"));
        let out = bin()
            .args([
                "finetune", "--data", data.to_str().unwrap(), "--target", "photo",
                "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
                "--seed", "7",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read_to_string(out_dir.join("loss.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "fine-tuning loss log is not reproducible");
}

#[test]
fn exit_codes() {
    // usage error
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // data error: missing directory
    let out = bin()
        .args(["pretrain", "--data", "/no/such/dir", "--out", "/tmp/ssdg-nonexistent-out"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // data error: unknown target domain
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let out = bin()
        .args([
            "finetune", "--data", data.to_str().unwrap(), "--target", "mosaic",
            "--out", tmp.path().join("x").to_str().unwrap(), "--epochs", "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // help exits 0
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
