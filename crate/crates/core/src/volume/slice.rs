//! Slice extraction and image export: grayscale PGM slices and PPM overlays
//! blending a base volume with a hot-colormapped importance map.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Volume3;

/// Slicing axis; the exported image covers the two remaining axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Sagittal plane (image rows = z, cols = y).
    X,
    /// Axial plane (image rows = z, cols = x).
    Y,
    /// Coronal plane (image rows = y, cols = x).
    Z,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::X => "sagittal",
            Axis::Y => "axial",
            Axis::Z => "coronal",
        }
    }
}

/// Extracts a 2D slice as (rows, cols, values). Row/col layout per [`Axis`].
fn extract(v: &Volume3, axis: Axis, index: usize) -> Result<(usize, usize, Vec<f32>)> {
    let (nx, ny, nz) = v.dims();
    let bound = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= bound {
        return Err(Error::InvalidArgument(format!(
            "slice index {index} out of range for axis {axis:?} with {bound} voxels"
        )));
    }
    let (rows, cols) = match axis {
        Axis::X => (nz, ny),
        Axis::Y => (nz, nx),
        Axis::Z => (ny, nx),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let value = match axis {
                Axis::X => v.at(index, c, r),
                Axis::Y => v.at(c, index, r),
                Axis::Z => v.at(c, r, index),
            };
            out.push(value);
        }
    }
    Ok((rows, cols, out))
}

/// Min-max rescales slice values to bytes in [0, 255]; a constant slice maps to 0.
pub fn rescale_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![0u8; values.len()];
    }
    let scale = 255.0 / (hi - lo);
    values
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Fixed 256-entry hot colormap (black -> red -> yellow -> white).
pub fn hot_colormap() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let t = i as f32 / 255.0;
        let r = (3.0 * t).clamp(0.0, 1.0);
        let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
        let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
        *entry = [
            (r * 255.0).round() as u8,
            (g * 255.0).round() as u8,
            (b * 255.0).round() as u8,
        ];
    }
    lut
}

fn write_pgm(path: &Path, rows: usize, cols: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_ppm(path: &Path, rows: usize, cols: usize, rgb: &[u8]) -> Result<()> {
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Exports one grayscale slice as a binary PGM, min-max rescaled to [0, 255].
pub fn export_slice(v: &Volume3, axis: Axis, index: usize, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols, values) = extract(v, axis, index)?;
    let bytes = rescale_to_bytes(&values);
    write_pgm(path.as_ref(), rows, cols, &bytes)
}

/// Exports an overlay slice as a binary PPM. Per pixel:
/// `out = (1 - alpha) * gray + alpha * colormap(cam)`, with the base slice
/// min-max rescaled to grayscale and the cam value (clamped to [0, 1]) indexing
/// the fixed hot colormap.
pub fn overlay_slice(
    base: &Volume3,
    cam: &Volume3,
    axis: Axis,
    index: usize,
    alpha: f32,
    path: impl AsRef<Path>,
) -> Result<()> {
    if base.dims() != cam.dims() {
        return Err(Error::ShapeMismatch(format!(
            "base dims {:?} != cam dims {:?}",
            base.dims(),
            cam.dims()
        )));
    }
    let rgb = overlay_pixels(base, cam, axis, index, alpha)?;
    let (rows, cols, _) = extract(base, axis, index)?;
    write_ppm(path.as_ref(), rows, cols, &rgb)
}

/// Computes the overlay RGB bytes without writing a file. Exposed for reuse by
/// the atlas report renderer and for direct pixel assertions in tests.
pub fn overlay_pixels(
    base: &Volume3,
    cam: &Volume3,
    axis: Axis,
    index: usize,
    alpha: f32,
) -> Result<Vec<u8>> {
    if base.dims() != cam.dims() {
        return Err(Error::ShapeMismatch(format!(
            "base dims {:?} != cam dims {:?}",
            base.dims(),
            cam.dims()
        )));
    }
    let (_, _, base_values) = extract(base, axis, index)?;
    let (_, _, cam_values) = extract(cam, axis, index)?;
    let gray = rescale_to_bytes(&base_values);
    let lut = hot_colormap();
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for (g, c) in gray.iter().zip(&cam_values) {
        let idx = (c.clamp(0.0, 1.0) * 255.0).round() as usize;
        let color = lut[idx];
        for ch in 0..3 {
            let v = (1.0 - alpha) * *g as f32 + alpha * color[ch] as f32;
            rgb.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(rgb)
}
