//! Named-tensor archive: `manifest.json` plus one `weights.bin` blob of
//! little-endian `f32` tensors at recorded byte offsets.

use std::fs;
use std::path::Path;

use aroma_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{read_f32, write_f32};
use crate::error::{LabError, LabResult};

pub const FORMAT: &str = "aroma-lab/checkpoint";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Everything needed to rebuild the modules that own the tensors.
    pub config: Value,
    /// Free-form facts about the run (epoch, losses, hashes).
    #[serde(default)]
    pub metadata: Value,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: Value, metadata: Value) -> Self {
        let tensors: Vec<(String, Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: vec![t.rows(), t.cols()],
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format: FORMAT.into(),
                version: 1,
                tensors: entries,
                config,
                metadata,
            },
            tensors,
        }
    }

    pub fn write(&self, dir: &Path) -> LabResult<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut blob = Vec::new();
        for (_, t) in &self.tensors {
            blob.extend(t.data().iter().map(|&v| v as f32));
        }
        // weights first, manifest last: a readable manifest implies complete weights
        let tmp = dir.join(format!("{WEIGHTS}.tmp"));
        write_f32(&tmp, &blob)?;
        fs::rename(&tmp, dir.join(WEIGHTS)).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| LabError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))
    }

    pub fn read(dir: &Path) -> LabResult<Self> {
        let path = dir.join("manifest.json");
        if !path.is_file() || !dir.join(WEIGHTS).is_file() {
            return Err(LabError::dependency("checkpoint", dir));
        }
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| LabError::json(&path, e))?;
        if manifest.format != FORMAT {
            return Err(LabError::Format(format!("{} is not a checkpoint", dir.display())));
        }
        let blob = read_f32(&dir.join(WEIGHTS))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" || e.shape.len() != 2 || e.offset % 4 != 0 {
                return Err(LabError::Format(format!("unsupported tensor entry {}", e.name)));
            }
            let start = e.offset / 4;
            let end = start + e.numel();
            if end > blob.len() {
                return Err(LabError::Format(format!("tensor {} runs past the end of {WEIGHTS}", e.name)));
            }
            let data = blob[start..end].iter().map(|&v| v as f64).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)));
        }
        Ok(Self { manifest, tensors })
    }

    /// Copies every tensor of `store` from the archive. Extra archive tensors
    /// are ignored; missing ones or shape mismatches are errors.
    pub fn load_into(&self, store: &mut ParamStore) -> LabResult<()> {
        let ids: Vec<_> = store.iter().map(|(id, n, t)| (id, n.to_string(), t.shape())).collect();
        for (id, name, shape) in ids {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| LabError::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape {
                return Err(LabError::Format(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// SHA-256 over names and exact `f64` bits of all tensors under the prefixes.
pub fn weights_hash(store: &ParamStore, prefixes: &[&str]) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
