//! Clustering-as-pseudo-labels pretraining: each epoch re-clusters the
//! current features, re-draws the cluster head's final layer, and trains on
//! the edge-map view of the images.
//!
//! Usage: cargo run --release --example deepcluster_pretraining

use ndarray::{Array4, Axis};
use ssdg::data::{synth_domains, SYNTH_CLASSES};
use ssdg::nets::BackboneConfig;
use ssdg::trainer::{
    build_train_state, deepcluster_train, OptimConfig, PretrainConfig, PretrainPool, Strategy, TaskId,
};

fn main() {
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(2, &classes, 6, 32).expect("corpus");
    let n: usize = domains.iter().map(|d| d.len()).sum();
    let (_, c, h, w) = domains[0].images.dim();
    let mut pool_imgs = Array4::zeros((n, c, h, w));
    let mut at = 0;
    for d in &domains {
        for i in 0..d.len() {
            pool_imgs.index_axis_mut(Axis(0), at).assign(&d.images.index_axis(Axis(0), i));
            at += 1;
        }
    }

    let backbone = BackboneConfig::small(32);
    let cfg = PretrainConfig {
        optim: OptimConfig {
            lr: 0.05,
            weight_decay: 1e-5,
            epochs: 4,
            batch_size: 16,
            seed: 2,
            ..OptimConfig::default()
        },
        tasks: vec![TaskId::Dc],
        strategy: Strategy::Avg,
        cluster_k: 8,
        ..PretrainConfig::default()
    };
    let mut state = build_train_state(&backbone, &cfg).expect("state");
    let pool = PretrainPool {
        train: &pool_imgs,
        val: &pool_imgs,
        gabor_train: &[],
        gabor_val: &[],
        cluster_k: cfg.cluster_k,
    };
    deepcluster_train(&mut state, &pool, cfg.optim.epochs).expect("training");

    // cluster occupancy after the last reassignment
    let mut counts = vec![0usize; cfg.cluster_k];
    for &l in &state.pseudo_labels {
        counts[l] += 1;
    }
    println!("cluster sizes after epoch {}: {:?}", state.epoch, counts);
    let mean_loss: f64 =
        state.loss_log.iter().map(|r| r.raw_loss).sum::<f64>() / state.loss_log.len() as f64;
    println!("mean pseudo-label cross-entropy over the run: {mean_loss:.4} (ln k = {:.4})", (cfg.cluster_k as f64).ln());
}
