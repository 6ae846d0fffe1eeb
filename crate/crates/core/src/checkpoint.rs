//! Checkpoint directories: `manifest.json` plus one little-endian `f32` file
//! per tensor, each checked against its recorded length and SHA-256.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tasks::{TaskRegistry, TaskSpec};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(a: &Array2<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write `model` under `dir` (created if needed).
pub fn save(model: &Model<f32>, dir: &Path, train: Option<&TrainConfig>) -> Result<Manifest> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    for (i, (_, name, value)) in model.params.iter().enumerate() {
        let bytes = tensor_bytes(value);
        let file = format!("tensors/{i:04}.f32");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let (r, c) = value.dim();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [r, c],
            file,
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        tasks: model.registry.specs().to_vec(),
        init_seed: model.init_seed,
        train: train.cloned(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptPayload(format!("{}: {e}", path.display())))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptPayload(format!("{}: {e}", path.display())))
}

/// Load a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(Model<f32>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::<f32>::new();
    for t in &manifest.tensors {
        let path = dir.join(&t.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = t.shape[0] * t.shape[1] * 4;
        if bytes.len() != t.bytes || bytes.len() != expected {
            return Err(Error::CorruptPayload(format!(
                "tensor `{}` has {} bytes, expected {expected}",
                t.name,
                bytes.len()
            )));
        }
        if sha256_hex(&bytes) != t.sha256 {
            return Err(Error::CorruptPayload(format!("tensor `{}` fails its checksum", t.name)));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let a = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("checked length");
        store
            .add(t.name.clone(), a)
            .map_err(|_| Error::CorruptPayload(format!("tensor `{}` listed twice", t.name)))?;
    }
    let registry = TaskRegistry::from_specs(manifest.tasks.clone())?;
    let model = Model::from_params(manifest.model.clone(), registry, store, manifest.init_seed)?;
    Ok((model, manifest))
}
