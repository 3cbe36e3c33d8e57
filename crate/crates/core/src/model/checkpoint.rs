//! Checkpoint format: a JSON manifest plus a flat little-endian f64 blob.
//!
//! ```json
//! { "manifest": { "format": "masklab.model/1", "config": {...},
//!                 "tensors": [{"name": "...", "shape": [..], "offset": 0}, ...],
//!                 "weights_fnv1a": "0123456789abcdef" },
//!   "weights_file": "model.bin" }
//! ```
//!
//! The model fingerprint is FNV-1a over the serialized `manifest` object,
//! which covers the architecture and (through the blob checksum) the weight
//! values, independently of where the files live.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{weight_plan, Model, ModelConfig, ModelError, Result};
use crate::seed::fnv1a64;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "masklab.model/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub weights_fnv1a: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    manifest: ModelManifest,
    weights_file: String,
}

impl ModelManifest {
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

fn blob(weights: &[Tensor]) -> Vec<u8> {
    weights
        .iter()
        .flat_map(|w| w.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Model {
    pub fn manifest(&self) -> ModelManifest {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.weights)
            .map(|(name, w)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: w.shape().to_vec(),
                    offset,
                };
                offset += w.len();
                e
            })
            .collect();
        ModelManifest {
            format: MODEL_FORMAT.into(),
            config: self.config.clone(),
            tensors,
            weights_fnv1a: format!("{:016x}", fnv1a64(&blob(&self.weights))),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.manifest().fingerprint()
    }

    /// Writes the manifest to `path` and the weights next to it with a
    /// `.bin` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin_path = path.with_extension("bin");
        let weights_file = bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| ModelError::Checkpoint(format!("bad path {}", path.display())))?
            .to_string();
        let file = CheckpointFile {
            manifest: self.manifest(),
            weights_file,
        };
        let json = serde_json::to_string_pretty(&file).expect("manifest serializes");
        fs::write(&bin_path, blob(&self.weights)).map_err(io_err(&bin_path))?;
        fs::write(path, json + "\n").map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|source| ModelError::Json {
            path: path.display().to_string(),
            source,
        })?;
        let manifest = file.manifest;
        if manifest.format != MODEL_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let bin_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&file.weights_file);
        let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
        let checksum = format!("{:016x}", fnv1a64(&bytes));
        if checksum != manifest.weights_fnv1a {
            return Err(ModelError::Checkpoint(format!(
                "weights checksum {checksum} does not match manifest {}",
                manifest.weights_fnv1a
            )));
        }
        if bytes.len() % 8 != 0 {
            return Err(ModelError::Checkpoint(
                "weight blob is not a whole number of f64".into(),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let plan = weight_plan(&manifest.config);
        if plan.len() != manifest.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors for this config, manifest lists {}",
                plan.len(),
                manifest.tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(plan.len());
        let mut weights = Vec::with_capacity(plan.len());
        for ((name, shape, _), entry) in plan.into_iter().zip(&manifest.tensors) {
            if entry.name != name || entry.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| ModelError::Checkpoint(format!("tensor `{name}` overruns blob")))?
                .to_vec();
            names.push(name);
            weights.push(Tensor::new(shape, data)?);
        }
        Ok(Self::assemble(manifest.config, names, weights))
    }
}
