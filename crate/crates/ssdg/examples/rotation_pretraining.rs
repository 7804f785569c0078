//! Single-task rotation-prediction pretraining on the pooled synthetic
//! corpus, printing the held-out rotation accuracy per epoch.
//!
//! Usage: cargo run --release --example rotation_pretraining

use ndarray::{Array4, Axis};
use ssdg::data::{synth_domains, DomainDataset, SYNTH_CLASSES};
use ssdg::nets::BackboneConfig;
use ssdg::trainer::{pretrain, OptimConfig, PretrainConfig, Strategy, TaskId};

/// Pools the train (and val) splits of every domain into unlabeled stacks.
fn pools(domains: &[DomainDataset]) -> (Array4<f64>, Array4<f64>) {
    let (_, c, h, w) = domains[0].images.dim();
    let nt: usize = domains.iter().map(|d| d.train_idx.len()).sum();
    let nv: usize = domains.iter().map(|d| d.val_idx.len()).sum();
    let mut train = Array4::zeros((nt, c, h, w));
    let mut val = Array4::zeros((nv, c, h, w));
    let (mut a, mut b) = (0, 0);
    for d in domains {
        for &i in &d.train_idx {
            train.index_axis_mut(Axis(0), a).assign(&d.images.index_axis(Axis(0), i));
            a += 1;
        }
        for &i in &d.val_idx {
            val.index_axis_mut(Axis(0), b).assign(&d.images.index_axis(Axis(0), i));
            b += 1;
        }
    }
    (train, val)
}

fn main() {
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(0, &classes, 10, 32).expect("corpus");
    let (train, val) = pools(&domains);
    println!("pool: {} train / {} val images", train.dim().0, val.dim().0);

    let backbone = BackboneConfig::small(32);
    let cfg = PretrainConfig {
        optim: OptimConfig { epochs: 8, batch_size: 32, seed: 0, ..OptimConfig::default() },
        tasks: vec![TaskId::R],
        strategy: Strategy::Avg,
        ..PretrainConfig::default()
    };
    let outcome = pretrain(&backbone, &cfg, &train, &val, None).expect("pretraining");
    for (e, acc) in outcome.rotation_val_accuracy.iter().enumerate() {
        println!("epoch {:>2}: rotation accuracy {:.3}", e + 1, acc);
    }
}
