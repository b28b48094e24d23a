//! Raw float blobs, seed derivation, and small file helpers shared by the
//! dataset writer, checkpoints, and the experiment ledger.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: expected {expected} bytes ({floats} little-endian f32), got {got}")]
    BlobLength { path: String, expected: usize, floats: usize, got: usize },
    #[error("json error on {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File { path: path.display().to_string(), source }
}

/// Write a little-endian f32 blob.
pub fn write_f32(path: &Path, values: &[f32]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| file_err(path, e))
}

/// Read a little-endian f32 blob, enforcing the expected element count.
pub fn read_f32(path: &Path, expected_floats: usize) -> Result<Vec<f32>, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    if bytes.len() != expected_floats * 4 {
        return Err(IoError::BlobLength {
            path: path.display().to_string(),
            expected: expected_floats * 4,
            floats: expected_floats,
            got: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Json { path: path.display().to_string(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| file_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::Json { path: path.display().to_string(), source: e })
}

/// Write-then-rename so concurrent readers never observe a partial file.
pub fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Json { path: path.display().to_string(), source: e })?;
    {
        let mut f = fs::File::create(&tmp).map_err(|e| file_err(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| file_err(&tmp, e))?;
        f.write_all(b"\n").map_err(|e| file_err(&tmp, e))?;
        f.sync_all().map_err(|e| file_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| file_err(path, e))
}

/// splitmix64; used to derive independent stream seeds from a master seed
/// without depending on any library's hasher stability.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `tag` at position `index`, derived from a master seed.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        let vals = vec![0.0f32, -1.5, 3.25, f32::MIN_POSITIVE];
        write_f32(&p, &vals).unwrap();
        assert_eq!(read_f32(&p, 4).unwrap(), vals);
        assert!(matches!(read_f32(&p, 5), Err(IoError::BlobLength { .. })));
    }

    #[test]
    fn derived_seeds_are_distinct_per_index_and_tag() {
        let a = derive_seed(7, 1, 0);
        let b = derive_seed(7, 1, 1);
        let c = derive_seed(7, 2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 1, 0));
    }
}
