//! Checkpoint archive: a tar file holding `manifest.json` (tensor name ->
//! `{shape, dtype}`), one raw blob per tensor (row-major, little-endian f32),
//! and a `meta.json` with run-level metadata (backbone config, task list).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Sequential;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    shape: Vec<usize>,
    dtype: String,
}

/// Collects every parameter and buffer of a network as `(prefix.name, value)`.
pub fn collect_named(prefix: &str, net: &mut Sequential) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |name, p| out.push((format!("{prefix}.{name}"), p.value.clone())));
    net.visit_buffers(&mut |name, b| out.push((format!("{prefix}.{name}"), b.clone().into_dyn())));
    out
}

/// Writes every `prefix.`-scoped tensor back into the network; errors on a
/// missing name or a shape mismatch.
pub fn assign_named(prefix: &str, net: &mut Sequential, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut missing = Vec::new();
    let mut shape_err = None;
    net.visit_params(&mut |name, p| {
        let full = format!("{prefix}.{name}");
        match tensors.get(&full) {
            Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
            Some(t) => {
                shape_err = Some(format!("{full}: checkpoint {:?} vs model {:?}", t.shape(), p.value.shape()))
            }
            None => missing.push(full),
        }
    });
    net.visit_buffers(&mut |name, b| {
        let full = format!("{prefix}.{name}");
        match tensors.get(&full) {
            Some(t) if t.len() == b.len() => {
                for (dst, src) in b.iter_mut().zip(t.iter()) {
                    *dst = *src;
                }
            }
            Some(t) => shape_err = Some(format!("{full}: checkpoint {:?} vs buffer len {}", t.shape(), b.len())),
            None => missing.push(full),
        }
    });
    if let Some(e) = shape_err {
        return Err(Error::Checkpoint(e));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    Ok(())
}

/// Saves tensors plus metadata as a tar archive.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    tensors: &[(String, ArrayD<f64>)],
    meta: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut builder = tar::Builder::new(file);

    let manifest: BTreeMap<&str, TensorInfo> = tensors
        .iter()
        .map(|(name, t)| (name.as_str(), TensorInfo { shape: t.shape().to_vec(), dtype: "f32".into() }))
        .collect();
    append_bytes(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    append_bytes(&mut builder, "meta.json", &serde_json::to_vec_pretty(meta)?)?;
    for (name, t) in tensors {
        let standard = t.as_standard_layout();
        let mut bytes = Vec::with_capacity(standard.len() * 4);
        for v in standard.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        append_bytes(&mut builder, &format!("{name}.bin"), &bytes)?;
    }
    builder.into_inner()?.flush()?;
    Ok(())
}

fn append_bytes<W: Write>(builder: &mut tar::Builder<W>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder.append_data(&mut header, name, data)?;
    Ok(())
}

/// Loads a checkpoint archive; tensors widen back to f64.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(BTreeMap<String, ArrayD<f64>>, serde_json::Value)> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut archive = tar::Archive::new(file);
    let mut manifest: Option<BTreeMap<String, TensorInfo>> = None;
    let mut meta = serde_json::Value::Null;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        match name.as_str() {
            "manifest.json" => manifest = Some(serde_json::from_slice(&data)?),
            "meta.json" => meta = serde_json::from_slice(&data)?,
            _ => {
                if let Some(stripped) = name.strip_suffix(".bin") {
                    blobs.insert(stripped.to_string(), data);
                }
            }
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Checkpoint("archive has no manifest.json".into()))?;
    let mut tensors = BTreeMap::new();
    for (name, info) in manifest {
        let blob = blobs
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest names {name} but blob is absent")))?;
        let expect: usize = info.shape.iter().product::<usize>() * 4;
        if blob.len() != expect {
            return Err(Error::Checkpoint(format!(
                "{name}: blob has {} bytes, manifest shape {:?} needs {expect}",
                blob.len(),
                info.shape
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&info.shape), values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok((tensors, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_backbone, BackboneConfig};
    use ndarray::Array4;

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = BackboneConfig::small(32);
        let mut fx = build_backbone(&cfg, 42).unwrap();
        let tensors = collect_named("extractor", &mut fx.net);
        save_checkpoint(&path, &tensors, &serde_json::json!({"backbone": cfg})).unwrap();

        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta["backbone"]["variant"], "small");
        let mut fx2 = build_backbone(&cfg, 7).unwrap();
        assign_named("extractor", &mut fx2.net, &loaded).unwrap();

        let x = Array4::from_elem((1, 3, 32, 32), 0.5);
        let a = fx.forward(&x, false);
        let b = fx2.forward(&x, false);
        // f32 storage rounds, so compare at f32 resolution
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }

    #[test]
    fn missing_tensor_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = BackboneConfig::small(32);
        let mut fx = build_backbone(&cfg, 42).unwrap();
        let mut tensors = collect_named("extractor", &mut fx.net);
        tensors.pop();
        save_checkpoint(&path, &tensors, &serde_json::Value::Null).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert!(assign_named("extractor", &mut fx.net, &loaded).is_err());
    }
}
