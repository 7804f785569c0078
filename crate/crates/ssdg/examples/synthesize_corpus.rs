//! Generates the four-style synthetic shape corpus and saves it as a
//! domain/class directory tree.
//!
//! Usage: cargo run --example synthesize_corpus [OUT_DIR]

use ssdg::data::{save_domain_tree, synth_domains, SYNTH_CLASSES};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/corpus".to_string());
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(0, &classes, 10, 64).expect("corpus generation");

    for d in &domains {
        let mean: f64 = d.images.mean().unwrap();
        println!(
            "{:<10} {} images, {} train / {} val, mean intensity {:.3}",
            d.name,
            d.len(),
            d.train_idx.len(),
            d.val_idx.len(),
            mean
        );
    }
    save_domain_tree(&out, &domains).expect("saving tree");
    println!("wrote corpus to {out}");
}
