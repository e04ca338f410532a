//! SHA-256 digests used by stage receipts: over serialized config sections
//! and over input artifact files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use agemap_core::{Error, Result};

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Digest of a JSON-serializable value (field order is the declaration
/// order, so equal values always produce equal digests).
pub fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config sections serialize");
    hex(&Sha256::digest(&bytes))
}

/// Digest of one file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Combined digest over a set of files: file names and contents are folded
/// in the given order, so renaming, reordering, or editing any one of them
/// changes the digest.
pub fn files_digest(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for path in paths {
        h.update(path.file_name().map_or_else(Vec::new, |n| {
            n.to_string_lossy().into_owned().into_bytes()
        }));
        h.update([0u8]);
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}
