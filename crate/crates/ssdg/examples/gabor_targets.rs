//! Builds the Gabor filter bank, inspects its kernels, and renders the
//! binary reconstruction target of a synthetic image.
//!
//! Usage: cargo run --example gabor_targets [OUT_DIR]

use ssdg::data::{synth_domains, SYNTH_CLASSES};
use ssdg::gabor::{build_gabor_bank, make_target, reconstruction_loss, GaborBankConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/gabor".to_string());
    std::fs::create_dir_all(&out).unwrap();

    let cfg = GaborBankConfig::default();
    let bank = build_gabor_bank(&cfg).expect("bank");
    println!("{} kernels of {}x{}", bank.len(), cfg.kernel_size, cfg.kernel_size);
    for (i, k) in bank.iter().enumerate() {
        println!(
            "  theta[{i}] = {:+.3} rad: sum {:+.4}, max |w| {:.4}",
            cfg.thetas[i],
            k.sum(),
            k.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        );
    }

    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(4, &classes, 1, 64).expect("corpus");
    for d in &domains {
        let img = d.image(0);
        let target = make_target(&img, &cfg).expect("target");
        let edge_frac = target.values.iter().filter(|&&v| v == 1).count() as f64 / target.values.len() as f64;
        // a constant 0.5 prediction scores ln 2 on any binary target
        let baseline = reconstruction_loss(
            &ndarray::Array2::from_elem((target.height(), target.width()), 0.5),
            &target,
        )
        .unwrap();
        println!("{:<10} edge fraction {:.3}, 0.5-baseline loss {:.4} (ln 2 = {:.4})", d.name, edge_frac, baseline, (2f64).ln());

        let mut png = image::GrayImage::new(target.width() as u32, target.height() as u32);
        for (x, y, p) in png.enumerate_pixels_mut() {
            p.0[0] = if target.values[(y as usize, x as usize)] == 1 { 255 } else { 0 };
        }
        png.save(format!("{out}/{}_target.png", d.name)).unwrap();
    }
    println!("previews in {out}");
}
