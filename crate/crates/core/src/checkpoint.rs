//! Checkpoint directory format: `manifest.json` (format version, model
//! config, volume standardization stats, per-tensor metadata with sha256
//! digests) plus one tensor file per parameter under `tensors/`.
//!
//! Loading verifies the version, every digest, and the parameter set before
//! returning; a corrupt or truncated checkpoint never yields a partial
//! model.

use crate::error::{Error, Result};
use crate::model::{BrainAgeModel, ModelConfig, VolumeStats};
use crate::tensor::{Dtype, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: Dtype,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    volume_stats: VolumeStats,
    tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn save_checkpoint(model: &BrainAgeModel, dir: &Path) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir)?;

    let mut entries = Vec::new();
    let mut io_err: Option<Error> = None;
    model.visit_params(&mut |name, t| {
        if io_err.is_some() {
            return;
        }
        let file = format!("{name}.tsr");
        let path = tensor_dir.join(&file);
        if let Err(e) = t.write(&path, Dtype::F64) {
            io_err = Some(e);
            return;
        }
        match std::fs::read(&path) {
            Ok(bytes) => entries.push(TensorEntry {
                name,
                file: format!("tensors/{file}"),
                shape: t.shape().to_vec(),
                dtype: Dtype::F64,
                sha256: sha256_hex(&bytes),
            }),
            Err(e) => io_err = Some(e.into()),
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        volume_stats: model.vol_stats.clone(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: dir.join("manifest.json").display().to_string(),
        why: e.to_string(),
    })?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<BrainAgeModel> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&json).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        why: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            why: format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }

    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum {
                path: path.display().to_string(),
            });
        }
        let tensor = Tensor::read(&path)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: path.display().to_string(),
                why: format!(
                    "shape {:?} does not match manifest {:?}",
                    tensor.shape(),
                    entry.shape
                ),
            });
        }
        loaded.insert(entry.name.clone(), tensor);
    }

    // Materialize a model of the right architecture, then swap in the
    // stored tensors; any missing or extra name is a count mismatch.
    let mut model = BrainAgeModel::init(manifest.model_config, manifest.volume_stats)?;
    let mut expected = 0usize;
    let mut missing: Vec<String> = Vec::new();
    let mut shape_err: Option<Error> = None;
    model.visit_params_mut(&mut |name, t| {
        expected += 1;
        match loaded.remove(&name) {
            Some(stored) => {
                if stored.shape() != t.shape() {
                    shape_err = Some(Error::Format {
                        path: name.clone(),
                        why: format!(
                            "stored shape {:?} does not match architecture {:?}",
                            stored.shape(),
                            t.shape()
                        ),
                    });
                } else {
                    *t = stored;
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if !missing.is_empty() || !loaded.is_empty() {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            why: format!(
                "parameter count mismatch: {} expected, {} missing ({:?}...), {} unknown",
                expected,
                missing.len(),
                missing.first(),
                loaded.len()
            ),
        });
    }
    Ok(model)
}
