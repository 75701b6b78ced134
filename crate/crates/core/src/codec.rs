//! Shared on-disk plumbing: little-endian `f32` payloads and atomic file writes.
//!
//! Every binary payload in the crate (embedding caches, prior tables, model
//! checkpoints) is a flat row-major run of little-endian `f32` values with no
//! header; shape information lives in the accompanying JSON manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

/// Encodes values as little-endian `f32` bytes.
pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a little-endian `f32` payload. Trailing bytes that do not form a
/// whole value are ignored; callers check the byte length against their
/// manifest before decoding.
pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Appends `suffix` to the final component of `base` (`runs/s` + `.f32bin` → `runs/s.f32bin`).
pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
