//! Checkpoints: a JSON manifest plus a sibling `.bin` holding every tensor as
//! little-endian f32, concatenated in manifest (lexicographic name) order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Creation metadata. Deliberately free of timestamps so identical runs
    /// write identical bytes.
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(
    params: &Parameters,
    metadata: BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        model: *params.config(),
        metadata,
        blob_bytes: blob.len() as u64,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(blob_path(path), &blob)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads and validates a checkpoint against the manifest's own ModelConfig.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let blob = std::fs::read(blob_path(path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let shapes = manifest.model.parameter_shapes();
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let expected = shapes
            .get(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        if *expected != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} needs bytes {start}..{end}, blob has {}",
                entry.name,
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let params = Parameters::from_tensors(manifest.model, tensors)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, manifest))
}
