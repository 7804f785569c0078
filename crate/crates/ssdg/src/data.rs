//! Domain datasets: PACS/VLCS-style directory ingestion and the deterministic
//! synthetic four-style shape corpus used for desk-scale runs.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::derive_rng;

/// One named domain with class-labeled images and a deterministic 80/20
/// train/val split.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    /// `(N, 3, S, S)`, values in [0,1].
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl DomainDataset {
    /// Builds the dataset and its split: |train| = ceil(0.8 N), indices
    /// shuffled by a stream derived from `(seed, name)`.
    pub fn new(
        name: impl Into<String>,
        images: Array4<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        seed: u64,
    ) -> Self {
        let name = name.into();
        let n = images.dim().0;
        assert_eq!(n, labels.len());
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(seed, &format!("split/{name}"));
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = (0.8 * n as f64).ceil() as usize;
        let mut train_idx = idx[..n_train].to_vec();
        let mut val_idx = idx[n_train..].to_vec();
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        DomainDataset { name, images, labels, class_names, train_idx, val_idx }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Array3<f64> {
        self.images.index_axis(Axis(0), i).to_owned()
    }

    /// Gathers `(images, labels)` for a list of sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::zeros((idx.len(), c, h, w));
        let mut labels = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }
}

/// Stacks all images of several domains into one unlabeled pool.
pub fn pooled_images(domains: &[&DomainDataset]) -> Array4<f64> {
    let total: usize = domains.iter().map(|d| d.len()).sum();
    let (_, c, h, w) = domains[0].images.dim();
    let mut out = Array4::zeros((total, c, h, w));
    let mut at = 0;
    for d in domains {
        let n = d.len();
        out.slice_mut(s![at..at + n, .., .., ..]).assign(&d.images);
        at += n;
    }
    out
}

/// Loads `root/<domain>/<class>/<image files>` trees (the PACS/VLCS layout).
pub fn load_domain_tree(root: impl AsRef<Path>, input_size: usize, seed: u64) -> Result<Vec<DomainDataset>> {
    let root = root.as_ref();
    let mut domains: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    domains.sort();
    if domains.is_empty() {
        return Err(Error::Data(format!("no domain directories under {}", root.display())));
    }

    // class sets must agree across domains
    let mut class_sets: Vec<(String, BTreeSet<String>)> = Vec::new();
    for d in &domains {
        let classes: BTreeSet<String> = std::fs::read_dir(root.join(d))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        class_sets.push((d.clone(), classes));
    }
    let reference = &class_sets[0].1;
    for (d, classes) in &class_sets[1..] {
        if classes != reference {
            let only_ref: Vec<_> = reference.difference(classes).cloned().collect();
            let only_d: Vec<_> = classes.difference(reference).cloned().collect();
            return Err(Error::Data(format!(
                "class sets differ: {} lacks {:?}, has extra {:?} (vs {})",
                d, only_ref, only_d, class_sets[0].0
            )));
        }
    }
    let class_names: Vec<String> = reference.iter().cloned().collect();

    let mut out = Vec::new();
    for d in &domains {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (ci, class) in class_names.iter().enumerate() {
            let dir = root.join(d).join(class);
            let mut files: Vec<_> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("empty class directory {}", dir.display())));
            }
            for f in files {
                let img = image::open(&f)
                    .map_err(|e| Error::ImageDecode { path: f.clone(), message: e.to_string() })?;
                let resized = image::imageops::resize(
                    &img.to_rgb8(),
                    input_size as u32,
                    input_size as u32,
                    image::imageops::FilterType::Triangle,
                );
                let mut arr = Array3::zeros((3, input_size, input_size));
                for (x, y, p) in resized.enumerate_pixels() {
                    for c in 0..3 {
                        arr[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
                    }
                }
                images.push(arr);
                labels.push(ci);
            }
        }
        let n = images.len();
        let mut stack = Array4::zeros((n, 3, input_size, input_size));
        for (i, img) in images.into_iter().enumerate() {
            stack.index_axis_mut(Axis(0), i).assign(&img);
        }
        out.push(DomainDataset::new(d.clone(), stack, labels, class_names.clone(), seed));
    }
    Ok(out)
}

pub const SYNTH_STYLES: [&str; 4] = ["photo", "painting", "cartoon", "sketch"];
pub const SYNTH_CLASSES: [&str; 5] = ["circle", "triangle", "square", "star", "cross"];

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Triangle,
    Square,
    Star,
    Cross,
}

impl Shape {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "circle" => Ok(Shape::Circle),
            "triangle" => Ok(Shape::Triangle),
            "square" => Ok(Shape::Square),
            "star" => Ok(Shape::Star),
            "cross" => Ok(Shape::Cross),
            other => Err(Error::Data(format!("unknown synthetic class {other:?}"))),
        }
    }

    /// Inside test in shape-local coordinates (unit radius).
    fn inside(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Circle => x * x + y * y <= 1.0,
            Shape::Square => x.abs().max(y.abs()) <= 0.82,
            Shape::Triangle => {
                // equilateral, apex up (screen y grows downward)
                let verts = [(0.0, -1.0), (0.9659, 0.7071), (-0.9659, 0.7071)];
                point_in_polygon(x, y, &verts)
            }
            Shape::Star => {
                let mut verts = Vec::with_capacity(10);
                for i in 0..10 {
                    let r = if i % 2 == 0 { 1.0 } else { 0.42 };
                    let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                    verts.push((r * a.cos(), r * a.sin()));
                }
                point_in_polygon(x, y, &verts)
            }
            Shape::Cross => (x.abs() <= 0.32 && y.abs() <= 1.0) || (y.abs() <= 0.32 && x.abs() <= 1.0),
        }
    }
}

fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    rot: f64,
}

/// Shape-local coordinates of an image-space point under a pose.
fn to_local(pose: &Pose, x: f64, y: f64) -> (f64, f64) {
    let dx = x - pose.cx;
    let dy = y - pose.cy;
    let (sin_r, cos_r) = pose.rot.sin_cos();
    let lx = (dx * cos_r + dy * sin_r) / pose.radius;
    let ly = (-dx * sin_r + dy * cos_r) / pose.radius;
    (lx, ly)
}

fn box_blur(img: &mut Array3<f64>) {
    let (c, h, w) = img.dim();
    let src = img.clone();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (y, x) = (i as i64 + di, j as i64 + dj);
                        if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                            acc += src[(ch, y as usize, x as usize)];
                            cnt += 1.0;
                        }
                    }
                }
                img[(ch, i, j)] = acc / cnt;
            }
        }
    }
}

/// Renders one sample of `shape` in the given style. Supersampled 2x then
/// box-downsampled for anti-aliasing. Fully determined by `rng`.
fn render_sample(shape: Shape, style: &str, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let s = size as f64;
    // vertical placement bias: shapes sit in the lower-middle band, which is
    // what makes the rotation pretext task solvable on this corpus
    let pose = Pose {
        cx: s * rng.gen_range(0.30..0.70),
        cy: s * rng.gen_range(0.52..0.74),
        radius: s * rng.gen_range(0.21..0.34),
        rot: rng.gen_range(-0.26..0.26),
    };
    let hue = rng.gen::<f64>();
    let fill = hsv_to_rgb(hue, 0.75, 0.85);
    let bg_hue = (hue + 0.5).rem_euclid(1.0);

    let ss = 2; // supersampling factor
    let n = size * ss;
    let mut hi = Array3::zeros((3, n, n));
    let mut noise_rng = rng.clone();

    for i in 0..n {
        for j in 0..n {
            let (px, py) = ((j as f64 + 0.5) / ss as f64, (i as f64 + 0.5) / ss as f64);
            let (lx, ly) = to_local(&pose, px, py);
            let inner = shape.inside(lx * 1.08, ly * 1.08);
            let outer = shape.inside(lx / 1.08, ly / 1.08);
            let inside = shape.inside(lx, ly);
            let frac_y = py / s;
            let color: [f64; 3] = match style {
                "photo" => {
                    if inside {
                        fill
                    } else {
                        // textured background with a vertical luminance gradient
                        let base = 0.75 - 0.35 * frac_y;
                        let tint = hsv_to_rgb(bg_hue, 0.25, base);
                        let nz = noise_rng.gen_range(-0.06..0.06);
                        [tint[0] + nz, tint[1] + nz, tint[2] + nz]
                    }
                }
                "painting" => {
                    if inside {
                        fill
                    } else {
                        let base = 0.85 - 0.30 * frac_y;
                        hsv_to_rgb(bg_hue, 0.35, base)
                    }
                }
                "cartoon" => {
                    if outer && !inner {
                        [0.05, 0.05, 0.05] // thick outline
                    } else if inside {
                        hsv_to_rgb(hue, 0.9, 0.95)
                    } else {
                        hsv_to_rgb(bg_hue, 0.15, 0.95 - 0.15 * frac_y)
                    }
                }
                // thin dark outline on white, zero chroma
                "sketch" => {
                    let thin_in = shape.inside(lx * 1.06, ly * 1.06);
                    let thin_out = shape.inside(lx / 1.06, ly / 1.06);
                    if thin_out && !thin_in {
                        [0.15, 0.15, 0.15]
                    } else {
                        [1.0, 1.0, 1.0]
                    }
                }
                other => panic!("unknown style {other}"),
            };
            for c in 0..3 {
                hi[(c, i, j)] = color[c].clamp(0.0, 1.0);
            }
        }
    }

    // downsample
    let mut out = Array3::zeros((3, size, size));
    for c in 0..3 {
        for i in 0..size {
            for j in 0..size {
                let mut acc = 0.0;
                for di in 0..ss {
                    for dj in 0..ss {
                        acc += hi[(c, i * ss + di, j * ss + dj)];
                    }
                }
                out[(c, i, j)] = acc / (ss * ss) as f64;
            }
        }
    }

    if style == "painting" {
        box_blur(&mut out);
        box_blur(&mut out);
        // color jitter
        for c in 0..3 {
            let f = rng.gen_range(0.85..1.15);
            out.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
        }
    }
    out
}

/// Generates the four-style synthetic corpus: one dataset per style, each
/// with `n_per_class` samples of every class, byte-deterministic in `seed`.
pub fn synth_domains(seed: u64, classes: &[String], n_per_class: usize, size: usize) -> Result<Vec<DomainDataset>> {
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be >= 1".into()));
    }
    let shapes: Vec<Shape> = classes.iter().map(|c| Shape::parse(c)).collect::<Result<_>>()?;
    let class_names: Vec<String> = classes.to_vec();
    let mut out = Vec::new();
    for style in SYNTH_STYLES {
        let n = classes.len() * n_per_class;
        let mut images = Array4::zeros((n, 3, size, size));
        let mut labels = Vec::with_capacity(n);
        let mut at = 0;
        for (ci, shape) in shapes.iter().enumerate() {
            for k in 0..n_per_class {
                let mut rng = derive_rng(seed, &format!("synth/{style}/{}/{k}", class_names[ci]));
                images.index_axis_mut(Axis(0), at).assign(&render_sample(*shape, style, size, &mut rng));
                labels.push(ci);
                at += 1;
            }
        }
        out.push(DomainDataset::new(style, images, labels, class_names.clone(), seed));
    }
    Ok(out)
}

/// Persists datasets in the `root/<domain>/<class>/<idx>.png` layout.
pub fn save_domain_tree(root: impl AsRef<Path>, domains: &[DomainDataset]) -> Result<()> {
    let root = root.as_ref();
    for d in domains {
        for (i, &label) in d.labels.iter().enumerate() {
            let dir = root.join(&d.name).join(&d.class_names[label]);
            std::fs::create_dir_all(&dir)?;
            let img = d.image(i);
            let (_, h, w) = img.dim();
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for c in 0..3 {
                    p.0[c] = (img[(c, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            buf.save(dir.join(format!("{i:04}.png")))
                .map_err(|e| Error::Data(format!("cannot write png: {e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        SYNTH_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn synth_counts_and_balance() {
        let ds = synth_domains(0, &classes(), 4, 32).unwrap();
        assert_eq!(ds.len(), 4);
        for d in &ds {
            assert_eq!(d.len(), 20);
            assert_eq!(d.train_idx.len(), 16);
            assert_eq!(d.val_idx.len(), 4);
            for c in 0..5 {
                assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 4);
            }
            assert!(d.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sketch_has_zero_chroma() {
        let ds = synth_domains(1, &classes(), 2, 32).unwrap();
        let sketch = ds.iter().find(|d| d.name == "sketch").unwrap();
        for img in sketch.images.outer_iter() {
            let (_, h, w) = img.dim();
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(img[(0, i, j)], img[(1, i, j)]);
                    assert_eq!(img[(1, i, j)], img[(2, i, j)]);
                }
            }
        }
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let a = synth_domains(9, &classes(), 2, 32).unwrap();
        let b = synth_domains(9, &classes(), 2, 32).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.images, y.images);
            assert_eq!(x.train_idx, y.train_idx);
        }
        let c = synth_domains(10, &classes(), 2, 32).unwrap();
        assert_ne!(a[0].images, c[0].images);
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(synth_domains(0, &["blob".to_string()], 2, 32).is_err());
    }

    #[test]
    fn tree_roundtrip_and_split_shape() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_domains(3, &classes()[..2].to_vec(), 10, 16).unwrap();
        save_domain_tree(dir.path(), &ds[..2]).unwrap();
        let loaded = load_domain_tree(dir.path(), 16, 5).unwrap();
        assert_eq!(loaded.len(), 2);
        for d in &loaded {
            assert_eq!(d.len(), 20);
            assert_eq!(d.train_idx.len(), 16); // ceil(0.8 * 20)
            assert_eq!(d.val_idx.len(), 4);
        }
        // same seed -> same split
        let again = load_domain_tree(dir.path(), 16, 5).unwrap();
        assert_eq!(loaded[0].train_idx, again[0].train_idx);
    }

    #[test]
    fn inconsistent_class_sets_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a/x")).unwrap();
        std::fs::create_dir_all(dir.path().join("b/y")).unwrap();
        // give class dirs at least one file so the class-set check fires first
        let ds = synth_domains(0, &vec!["circle".to_string()], 1, 16).unwrap();
        save_domain_tree(dir.path().join("tmp"), &ds[..1]).unwrap();
        let src = dir.path().join("tmp/photo/circle/0000.png");
        std::fs::copy(&src, dir.path().join("a/x/0.png")).unwrap();
        std::fs::copy(&src, dir.path().join("b/y/0.png")).unwrap();
        std::fs::remove_dir_all(dir.path().join("tmp")).unwrap();
        let err = load_domain_tree(dir.path(), 16, 0).unwrap_err();
        assert!(err.to_string().contains("class sets differ"), "{err}");
    }
}
