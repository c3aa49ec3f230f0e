//! Parameter checkpoints: a raw little-endian `f32` blob plus a JSON
//! manifest listing entry names and shapes in order. Round-trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

/// Write `<path>.json` (manifest) and `<path>.bin` (values). Values are
/// stored as 32-bit little-endian floats regardless of working precision.
pub fn save<E: Elem>(params: &Parameters<E>, path: &Path) -> Result<()> {
    let mut manifest = Manifest {
        entries: Vec::new(),
    };
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params.iter() {
        manifest.entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(with_ext(path, "json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(with_ext(path, "bin"), blob)?;
    Ok(())
}

pub fn load<E: Elem>(path: &Path) -> Result<Parameters<E>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(with_ext(path, "json"))?)?;
    let blob = fs::read(with_ext(path, "bin"))?;
    let mut params = Parameters::new();
    let mut off = 0usize;
    for entry in manifest.entries {
        let n: usize = entry.shape.iter().product();
        let end = off + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob truncated while reading {}",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[off..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(E::from_f64(v as f64));
        }
        off = end;
        params.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    if off != blob.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint blob".into()));
    }
    Ok(params)
}

fn with_ext(path: &Path, ext: &str) -> std::path::PathBuf {
    let mut p = path.to_path_buf();
    let name = format!(
        "{}.{ext}",
        p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    p.set_file_name(name);
    p
}
