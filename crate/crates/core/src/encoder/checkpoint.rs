//! Parameter checkpoints: a JSON manifest (`<stem>.json`) naming every tensor
//! and its shape, plus the raw little-endian `f32` buffer (`<stem>.bin`) with
//! the tensors concatenated in declared order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_f32_le, encode_f32_le, read_bytes, write_bytes};
use crate::params::{Parameters, TensorSpec};

pub const CHECKPOINT_FORMAT: &str = "sslmil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_DTYPE: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorSpec>,
    /// Model description needed to rebuild the parameter container.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointManifest {
    pub fn new(tensors: Vec<TensorSpec>, meta: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: CHECKPOINT_DTYPE.into(),
            tensors,
            meta,
        }
    }

    /// Parses and validates a manifest.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint manifest", format!("format {:?}", m.format)));
        }
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint manifest", format!("version {}", m.version)));
        }
        if m.dtype != CHECKPOINT_DTYPE {
            return Err(Error::format("checkpoint manifest", format!("dtype {:?}", m.dtype)));
        }
        m.total_len()?;
        Ok(m)
    }

    /// Total scalar count, checked for overflow.
    pub fn total_len(&self) -> Result<usize> {
        self.tensors.iter().try_fold(0usize, |acc, t| {
            t.shape[0]
                .checked_mul(t.shape[1])
                .and_then(|n| acc.checked_add(n))
                .ok_or_else(|| Error::format("checkpoint manifest", "tensor sizes overflow"))
        })
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save_checkpoint(stem: &Path, params: &impl Parameters, meta: serde_json::Value) -> Result<()> {
    let manifest = CheckpointManifest::new(params.specs(), meta);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_bytes(&manifest_path(stem), &json)?;
    let blob = encode_f32_le(params.tensors().into_iter().flatten().copied());
    write_bytes(&blob_path(stem), &blob)
}

/// Reads the manifest and the decoded buffer.
pub fn load_checkpoint_raw(stem: &Path) -> Result<(CheckpointManifest, Vec<f32>)> {
    let manifest = CheckpointManifest::parse(&read_bytes(&manifest_path(stem))?)?;
    let values = decode_f32_le(&read_bytes(&blob_path(stem))?, manifest.total_len()?)?;
    Ok((manifest, values))
}

/// Reads only the manifest.
pub fn load_checkpoint_manifest(stem: &Path) -> Result<CheckpointManifest> {
    CheckpointManifest::parse(&read_bytes(&manifest_path(stem))?)
}

/// Fills `params` from a checkpoint whose tensor list must match exactly.
pub fn load_checkpoint_into(stem: &Path, params: &mut impl Parameters) -> Result<CheckpointManifest> {
    let (manifest, values) = load_checkpoint_raw(stem)?;
    if manifest.tensors != params.specs() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint {} does not match the model's tensor layout",
            stem.display()
        )));
    }
    let mut it = values.into_iter();
    for t in params.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(it.by_ref()) {
            *slot = f64::from(v);
        }
    }
    Ok(manifest)
}

/// Hex SHA-256 of the checkpoint's manifest and buffer bytes.
pub fn checkpoint_hash(stem: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(read_bytes(&manifest_path(stem))?);
    h.update(read_bytes(&blob_path(stem))?);
    Ok(hex::encode(h.finalize()))
}
