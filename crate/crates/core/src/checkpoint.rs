//! On-disk checkpoints: a JSON manifest listing `{name, shape, dtype, offset}`
//! per tensor, plus a companion blob of little-endian IEEE-754 floats laid
//! out in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Arch, ParamSet, ScoreNet};

pub const FORMAT: &str = "selfnpo-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 digests of what [`save_params`] wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHashes {
    pub manifest: String,
    pub blob: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode(
    params: &ParamSet,
    dtype: DType,
    arch: Option<&Arch>,
    blob_name: &str,
) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.num_scalars() * dtype.width());
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype,
            offset: blob.len() as u64,
        });
        for &v in t.iter() {
            match dtype {
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        blob: blob_name.to_string(),
        arch: arch.cloned(),
        tensors,
    };
    (manifest, blob)
}

pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ParamSet> {
    if manifest.format != FORMAT {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * entry.dtype.width();
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::invalid(format!(
                "tensor `{}` spans bytes {start}..{end}, blob has {}",
                entry.name,
                blob.len()
            ))
        })?;
        let values: Vec<f64> = match entry.dtype {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::invalid(e.to_string()))?;
        params.insert(entry.name.clone(), tensor)?;
    }
    Ok(params)
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob).
pub fn save_params(
    path: &Path,
    params: &ParamSet,
    dtype: DType,
    arch: Option<&Arch>,
) -> Result<CheckpointHashes> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode(params, dtype, arch, &blob_name);
    let json = serde_json::to_vec_pretty(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&blob_file, &blob)?;
    fs::write(path, &json)?;
    Ok(CheckpointHashes {
        manifest: sha256_hex(&json),
        blob: sha256_hex(&blob),
    })
}

pub fn load_params(path: &Path) -> Result<(ParamSet, Option<Arch>)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_file)?;
    Ok((decode(&manifest, &blob)?, manifest.arch))
}

pub fn save_net(path: &Path, net: &ScoreNet, dtype: DType) -> Result<CheckpointHashes> {
    save_params(path, net.params(), dtype, Some(net.arch()))
}

pub fn load_net(path: &Path) -> Result<ScoreNet> {
    let (params, arch) = load_params(path)?;
    let arch = arch.ok_or_else(|| {
        Error::config(format!(
            "checkpoint {} carries no architecture",
            path.display()
        ))
    })?;
    ScoreNet::from_params(arch, params)
}
