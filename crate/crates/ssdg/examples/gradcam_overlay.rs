//! Class-activation overlays: trains a small classifier briefly, then renders
//! a heatmap over each test image showing which pixels drove the predicted
//! class score.
//!
//! Usage: cargo run --release --example gradcam_overlay [OUT_DIR]

use ssdg::data::{synth_domains, SYNTH_CLASSES};
use ssdg::dg::{build_classifier, finetune, FinetuneConfig, Method};
use ssdg::explain::{default_gradcam_layer, gradcam, render_overlay};
use ssdg::nets::BackboneConfig;
use ssdg::trainer::OptimConfig;

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/gradcam".to_string());
    std::fs::create_dir_all(&out).unwrap();

    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let domains = synth_domains(5, &classes, 8, 32).expect("corpus");
    let sources: Vec<&_> = domains[..3].iter().collect();
    let target = &domains[3];

    let backbone = BackboneConfig::small(32);
    let cfg = FinetuneConfig {
        optim: OptimConfig { lr: 0.001, epochs: 5, batch_size: 16, seed: 0, ..OptimConfig::default() },
        ..FinetuneConfig::default()
    };
    let mut clf = build_classifier(&backbone, classes.len(), 0, None).expect("model");
    finetune(&mut clf, &sources, target, Method::Erm, &cfg, 0, "demo", "random").expect("training");

    let layer = default_gradcam_layer(&clf);
    for i in 0..4 {
        let img = target.image(i);
        let logits = clf.logits(&img.clone().insert_axis(ndarray::Axis(0)), false);
        let pred = logits
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        let heat = gradcam(&mut clf, &img, pred, layer).expect("heatmap");
        let overlay = render_overlay(&img, &heat, 0.45);

        let (_, h, w) = overlay.dim();
        let mut png = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in png.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = (overlay[(c, y as usize, x as usize)] * 255.0).round() as u8;
            }
        }
        let name = format!(
            "{out}/{}_{i}_pred-{}_true-{}.png",
            target.name, classes[pred], classes[target.labels[i]]
        );
        png.save(&name).unwrap();
        println!("{name}");
    }
}
