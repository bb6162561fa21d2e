//! Parameter checkpoints: a flat little-endian f32 tensor blob plus a JSON
//! manifest describing names, shapes, and offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Write `tensors.bin` + `manifest.json` under `dir`.
pub fn save(dir: &Path, tensors: &[(&str, Vec<usize>, Vec<f32>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, shape, data) in tensors {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: format!("tensor {name}: shape {shape:?} vs {} elements", data.len()),
            });
        }
        entries.push(TensorEntry { name: (*name).to_string(), shape: shape.clone(), offset });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    }
    let manifest =
        Manifest { format_version: 1, dtype: "f32le".to_string(), tensors: entries };
    fs::write(dir.join("tensors.bin"), blob)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a checkpoint back as (name, shape, data) triples in manifest order.
pub fn load(dir: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.dtype != "f32le" {
        return Err(Error::InvalidConfig(format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob = fs::read(dir.join("tensors.bin"))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + len * 4;
        if end > blob.len() {
            return Err(Error::ShapeMismatch {
                context: format!("tensor {} overruns the blob", entry.name),
            });
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name, entry.shape, data));
    }
    Ok(out)
}
