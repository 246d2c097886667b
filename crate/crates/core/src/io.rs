//! File helpers and the little-endian `f32` buffer codec shared by datasets
//! and checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Rounds each value to `f32` and writes it little-endian.
pub fn encode_f32_le(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

/// Decodes exactly `expected` little-endian `f32` values, rejecting
/// truncated or oversized buffers and non-finite entries.
pub fn decode_f32_le(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    let want = expected
        .checked_mul(4)
        .ok_or_else(|| Error::format("f32 buffer", "declared length overflows"))?;
    if bytes.len() != want {
        return Err(Error::format(
            "f32 buffer",
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(expected);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format("f32 buffer", format!("value {i} is not finite")));
        }
        out.push(v);
    }
    Ok(out)
}
