//! Transfer to shape classification: fine-tunes the same backbone from a
//! random initialization and from a self-supervised one, and compares
//! held-out-style accuracy.
//!
//! Usage: cargo run --release --example transfer_finetune

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use ssdg::data::{synth_domains, SYNTH_CLASSES};
use ssdg::dg::{build_classifier, finetune, FinetuneConfig, Method};
use ssdg::nets::BackboneConfig;
use ssdg::trainer::{pretrain, OptimConfig, PretrainConfig, Strategy, TaskId};

fn main() {
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(7, &classes, 8, 32).expect("corpus");
    let target = &domains[3]; // sketch: the most stylized domain
    let sources: Vec<&_> = domains[..3].iter().collect();

    // pool the source training splits for pretraining (no labels used)
    let (_, c, h, w) = domains[0].images.dim();
    let nt: usize = sources.iter().map(|d| d.train_idx.len()).sum();
    let nv: usize = sources.iter().map(|d| d.val_idx.len()).sum();
    let mut train = Array4::zeros((nt, c, h, w));
    let mut val = Array4::zeros((nv, c, h, w));
    let (mut a, mut b) = (0, 0);
    for d in &sources {
        for &i in &d.train_idx {
            train.index_axis_mut(Axis(0), a).assign(&d.images.index_axis(Axis(0), i));
            a += 1;
        }
        for &i in &d.val_idx {
            val.index_axis_mut(Axis(0), b).assign(&d.images.index_axis(Axis(0), i));
            b += 1;
        }
    }

    let backbone = BackboneConfig::small(32);
    let pre_cfg = PretrainConfig {
        optim: OptimConfig { epochs: 6, batch_size: 32, seed: 0, ..OptimConfig::default() },
        tasks: vec![TaskId::R, TaskId::G],
        strategy: Strategy::Avg,
        ..PretrainConfig::default()
    };
    let mut outcome = pretrain(&backbone, &pre_cfg, &train, &val, None).expect("pretraining");
    let init: BTreeMap<_, _> = outcome.state.named_tensors().into_iter().collect();

    let ft_cfg = FinetuneConfig {
        optim: OptimConfig { lr: 0.001, epochs: 6, batch_size: 16, seed: 0, ..OptimConfig::default() },
        ..FinetuneConfig::default()
    };
    for (label, tensors) in [("random", None), ("pretrained", Some(&init))] {
        let mut clf = build_classifier(&backbone, classes.len(), 0, tensors).expect("model");
        let res = finetune(&mut clf, &sources, target, Method::Erm, &ft_cfg, 0, "demo", label)
            .expect("fine-tuning");
        println!(
            "{label:<10} init: best target accuracy {:.3}, at best source val {:.3}",
            res.best_target_acc, res.target_acc_at_best_source_val
        );
    }
}
