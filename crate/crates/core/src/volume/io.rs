//! Bit-exact volume and displacement-field file IO.
//!
//! `.vol` layout: 8-byte magic `VOLF0001`, 4-byte little-endian header length,
//! UTF-8 JSON header `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32"}`,
//! then `nx*ny*nz` little-endian f32 values, x-fastest.
//!
//! `.dfield` layout: same framing with magic `DFLD0001` and dtype `f32x3`; the
//! payload interleaves `(ux, uy, uz)` per voxel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume3;

const VOL_MAGIC: &[u8; 8] = b"VOLF0001";
const DFIELD_MAGIC: &[u8; 8] = b"DFLD0001";

#[derive(Serialize, Deserialize)]
struct VolHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
}

fn encode(magic: &[u8; 8], header: &VolHeader, values: &[f32]) -> Result<Vec<u8>> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| Error::Header(format!("encode: {e}")))?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + values.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(magic: &[u8; 8], dtype: &str, bytes: &[u8]) -> Result<(VolHeader, Vec<f32>)> {
    if bytes.len() < 12 {
        return Err(Error::Header(format!(
            "file too short: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Header(format!(
            "declared header length {header_len} exceeds file size"
        )));
    }
    let header: VolHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Header(format!("decode: {e}")))?;
    if header.dtype != dtype {
        return Err(Error::Header(format!(
            "dtype mismatch: expected {dtype:?}, found {:?}",
            header.dtype
        )));
    }
    let payload = &bytes[12 + header_len..];
    if payload.len() % 4 != 0 {
        return Err(Error::Header(format!(
            "payload length {} is not a multiple of 4",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((header, values))
}

/// Writes a volume to a `.vol` file. Round-trip through [`read_vol`] is bit-exact.
pub fn write_vol(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = VolHeader {
        dims: [v.dims().0, v.dims().1, v.dims().2],
        spacing: [v.spacing().0, v.spacing().1, v.spacing().2],
        dtype: "f32".to_string(),
    };
    let bytes = encode(VOL_MAGIC, &header, v.data())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.vol` file written by [`write_vol`].
pub fn read_vol(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = decode(VOL_MAGIC, "f32", &bytes)?;
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    if values.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: values.len(),
        });
    }
    Volume3::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        values,
    )
}

/// Writes a per-voxel displacement field (`(ux,uy,uz)` interleaved) to a
/// `.dfield` file.
pub fn write_dfield(
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    displacements: &[f32],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let expected = dims.0 * dims.1 * dims.2 * 3;
    if displacements.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: displacements.len(),
        });
    }
    let header = VolHeader {
        dims: [dims.0, dims.1, dims.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        dtype: "f32x3".to_string(),
    };
    let bytes = encode(DFIELD_MAGIC, &header, displacements)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.dfield` file; returns dims, spacing, and the interleaved payload.
pub fn read_dfield(path: impl AsRef<Path>) -> Result<((usize, usize, usize), (f32, f32, f32), Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = decode(DFIELD_MAGIC, "f32x3", &bytes)?;
    let expected = header.dims[0] * header.dims[1] * header.dims[2] * 3;
    if values.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: values.len(),
        });
    }
    Ok((
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        values,
    ))
}
