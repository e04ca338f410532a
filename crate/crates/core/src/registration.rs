//! Affine and dense deformable registration by multi-resolution
//! gradient-based optimization, plus field application (warping) for images
//! and importance maps.
//!
//! Conventions: transforms map target (fixed-grid) voxel coordinates to
//! source coordinates — `output(x) = moving(L·x + t + u(x))` with trilinear
//! interpolation and zero background. Displacement fields live on the target
//! grid in voxel units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_dfield, write_dfield, Volume3};

/// Similarity metric between the fixed image and the warped moving image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// 1 − normalized cross-correlation; invariant to global gain/offset.
    Ncc,
    /// Mean squared difference.
    Ssd,
}

/// Registration parameters. Defaults: NCC, a 3-level pyramid (×4, ×2, ×1),
/// 100/150 iterations per level, Adam lr 0.01 for the affine stage, a
/// max-normalized step of 0.5 voxels for the deformable stage, diffusion
/// weight 0.1, per-iteration field smoothing σ = 1, and a stop when the
/// relative loss change over 10 iterations falls below 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub similarity: Similarity,
    pub levels: usize,
    pub affine_iters: usize,
    pub deform_iters: usize,
    pub affine_lr: f64,
    pub deform_lr: f32,
    pub lambda: f32,
    pub sigma: f32,
    pub tol: f64,
    pub tol_window: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            similarity: Similarity::Ncc,
            levels: 3,
            affine_iters: 100,
            deform_iters: 150,
            affine_lr: 0.01,
            deform_lr: 0.5,
            lambda: 0.1,
            sigma: 1.0,
            tol: 1e-5,
            tol_window: 10,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.levels >= 1
            && self.affine_iters >= 1
            && self.deform_iters >= 1
            && self.affine_lr > 0.0
            && self.deform_lr > 0.0
            && self.lambda >= 0.0
            && self.sigma >= 0.0
            && self.tol > 0.0
            && self.tol_window >= 1;
        if !positive {
            return Err(Error::InvalidArgument(
                "registration config requires positive counts and rates".into(),
            ));
        }
        Ok(())
    }

    /// Downsampling factors per level, coarse to fine (e.g. [4, 2, 1]).
    fn factors(&self) -> Vec<usize> {
        (0..self.levels).map(|i| 1 << (self.levels - 1 - i)).collect()
    }
}

/// Affine map from target voxel coordinates to source coordinates:
/// `src = L·x + t`. Orientation-preserving (det L > 0), finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub l: [[f32; 3]; 3],
    pub t: [f32; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            l: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Pure translation (handy for tests and constructed examples).
    pub fn translation(t: [f32; 3]) -> Self {
        AffineTransform {
            t,
            ..Self::identity()
        }
    }

    /// Builds the plain form from a parameterization centered on `dims`'
    /// grid center C: `src = C + L(x − C) + tc`.
    pub fn centered(l: [[f32; 3]; 3], tc: [f32; 3], dims: (usize, usize, usize)) -> Self {
        let c = grid_center(dims);
        let mut t = [0.0f32; 3];
        for j in 0..3 {
            let mut lc = 0.0f32;
            for k in 0..3 {
                lc += l[j][k] * c[k];
            }
            t[j] = c[j] - lc + tc[j];
        }
        AffineTransform { l, t }
    }

    pub fn det(&self) -> f32 {
        let m = &self.l;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .l
            .iter()
            .flatten()
            .chain(&self.t)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("affine entries must be finite".into()));
        }
        if self.det() <= 0.0 {
            return Err(Error::Degenerate(format!(
                "affine must preserve orientation (det {} <= 0)",
                self.det()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: [f32; 3]) -> [f32; 3] {
        let mut out = self.t;
        for j in 0..3 {
            for k in 0..3 {
                out[j] += self.l[j][k] * x[k];
            }
        }
        out
    }

    /// Max absolute deviation of L from identity.
    pub fn linear_deviation(&self) -> f32 {
        let mut d = 0.0f32;
        for j in 0..3 {
            for k in 0..3 {
                let id = if j == k { 1.0 } else { 0.0 };
                d = d.max((self.l[j][k] - id).abs());
            }
        }
        d
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Header(format!("affine encode: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: AffineTransform =
            serde_json::from_str(&text).map_err(|e| Error::Header(format!("affine decode: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}

fn grid_center(dims: (usize, usize, usize)) -> [f32; 3] {
    [
        (dims.0 - 1) as f32 / 2.0,
        (dims.1 - 1) as f32 / 2.0,
        (dims.2 - 1) as f32 / 2.0,
    ]
}

/// Dense per-voxel displacement (ux, uy, uz) on the target grid, voxel
/// units, interleaved storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        DisplacementField {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2 * 3],
        }
    }

    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let expected = dims.0 * dims.1 * dims.2 * 3;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(DisplacementField { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = 3 * (x + self.dims.0 * (y + self.dims.1 * z));
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean Euclidean norm of the displacement vectors.
    pub fn mean_norm(&self) -> f64 {
        let n = self.data.len() / 3;
        let mut sum = 0.0f64;
        for v in self.data.chunks_exact(3) {
            sum += ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) as f64).sqrt();
        }
        sum / n as f64
    }

    /// Smoothness proxy: mean squared forward-difference gradient over all
    /// components and axes.
    pub fn smoothness(&self) -> f64 {
        let (sum, count) = self.gradient_energy();
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn gradient_energy(&self) -> (f64, usize) {
        let (nx, ny, nz) = self.dims;
        let idx = |x: usize, y: usize, z: usize| 3 * (x + nx * (y + ny * z));
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = idx(x, y, z);
                    for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (xa, ya, za) = (x + dx, y + dy, z + dz);
                        if xa >= nx || ya >= ny || za >= nz {
                            continue;
                        }
                        let j = idx(xa, ya, za);
                        for c in 0..3 {
                            let d = (self.data[j + c] - self.data[i + c]) as f64;
                            sum += d * d;
                            count += 1;
                        }
                    }
                }
            }
        }
        (sum, count)
    }

    /// Trilinearly resamples each component to `new_dims`, multiplying
    /// component `c` by `scale[c]` (used when moving a field to a finer
    /// pyramid level, where the same physical shift spans more voxels).
    pub fn resample_scaled(&self, new_dims: (usize, usize, usize), scale: [f32; 3]) -> Result<Self> {
        let n_old = self.dims.0 * self.dims.1 * self.dims.2;
        let n_new = new_dims.0 * new_dims.1 * new_dims.2;
        let mut out = vec![0.0f32; n_new * 3];
        for c in 0..3 {
            let comp: Vec<f32> = (0..n_old).map(|i| self.data[3 * i + c]).collect();
            let vol = Volume3::new(self.dims, (1.0, 1.0, 1.0), comp)?;
            let res = vol.resample(new_dims)?;
            for (i, &v) in res.data().iter().enumerate() {
                out[3 * i + c] = v * scale[c];
            }
        }
        DisplacementField::new(new_dims, out)
    }

    /// Gaussian-smooths each component in place (σ in voxels).
    pub fn smooth(&self, sigma: f32) -> Result<Self> {
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let n = self.dims.0 * self.dims.1 * self.dims.2;
        let mut out = vec![0.0f32; n * 3];
        for c in 0..3 {
            let comp: Vec<f32> = (0..n).map(|i| self.data[3 * i + c]).collect();
            let vol = Volume3::new(self.dims, (1.0, 1.0, 1.0), comp)?;
            let sm = vol.gaussian_smooth(sigma)?;
            for (i, &v) in sm.data().iter().enumerate() {
                out[3 * i + c] = v;
            }
        }
        DisplacementField::new(self.dims, out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dfield(self.dims, (1.0, 1.0, 1.0), &self.data, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, _spacing, data) = read_dfield(path)?;
        DisplacementField::new(dims, data)
    }
}

/// Rewrites a field found against an affine-prewarped moving image so it can
/// be applied together with that affine in a single [`warp`] call:
/// `m_aff(x + u(x)) = m(L·x + t + L·u(x))`, so the composed field is `L·u`.
pub fn compose_with_affine(affine: &AffineTransform, field: &DisplacementField) -> DisplacementField {
    let mut data = Vec::with_capacity(field.data.len());
    for v in field.data.chunks_exact(3) {
        for j in 0..3 {
            data.push(affine.l[j][0] * v[0] + affine.l[j][1] * v[1] + affine.l[j][2] * v[2]);
        }
    }
    DisplacementField {
        dims: field.dims,
        data,
    }
}

/// Similarity loss between equal-dim volumes. NCC requires both volumes to
/// be non-constant.
pub fn similarity(fixed: &Volume3, moving_warped: &Volume3, kind: Similarity) -> Result<f64> {
    if fixed.dims() != moving_warped.dims() {
        return Err(Error::ShapeMismatch(format!(
            "similarity dims {:?} vs {:?}",
            fixed.dims(),
            moving_warped.dims()
        )));
    }
    let (loss, _) = similarity_grad(fixed.data(), moving_warped.data(), kind)?;
    Ok(loss)
}

/// Loss plus analytic gradient with respect to the moving (second) values.
fn similarity_grad(f: &[f32], m: &[f32], kind: Similarity) -> Result<(f64, Vec<f32>)> {
    let n = f.len();
    match kind {
        Similarity::Ssd => {
            let mut loss = 0.0f64;
            let mut grad = vec![0.0f32; n];
            let inv = 1.0 / n as f64;
            for i in 0..n {
                let d = (m[i] - f[i]) as f64;
                loss += d * d;
                grad[i] = (2.0 * d * inv) as f32;
            }
            Ok((loss * inv, grad))
        }
        Similarity::Ncc => {
            let inv = 1.0 / n as f64;
            let fbar = f.iter().map(|&v| v as f64).sum::<f64>() * inv;
            let mbar = m.iter().map(|&v| v as f64).sum::<f64>() * inv;
            let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                let a = f[i] as f64 - fbar;
                let b = m[i] as f64 - mbar;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
            if saa <= 1e-9 || sbb <= 1e-9 {
                return Err(Error::Degenerate(
                    "correlation similarity is undefined on a constant volume".into(),
                ));
            }
            let denom = (saa * sbb).sqrt();
            let loss = 1.0 - sab / denom;
            let scale = 1.0 / denom;
            let ratio = sab / sbb;
            let mut grad = vec![0.0f32; n];
            for i in 0..n {
                let a = f[i] as f64 - fbar;
                let b = m[i] as f64 - mbar;
                grad[i] = (-(scale * (a - ratio * b))) as f32;
            }
            Ok((loss, grad))
        }
    }
}

/// Backward warping onto a target grid: `out(x) = v(L·x + t + u(x))` with
/// trilinear interpolation and zero outside the source domain. The same call
/// applies to images and importance maps.
pub fn warp(
    v: &Volume3,
    affine: &AffineTransform,
    field: Option<&DisplacementField>,
    target_dims: (usize, usize, usize),
) -> Result<Volume3> {
    if let Some(u) = field {
        if u.dims() != target_dims {
            return Err(Error::ShapeMismatch(format!(
                "field dims {:?} != target dims {:?}",
                u.dims(),
                target_dims
            )));
        }
    }
    let (nx, ny, nz) = target_dims;
    let mut data = vec![0.0f32; nx * ny * nz];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = affine.apply([x as f32, y as f32, z as f32]);
                if let Some(u) = field {
                    let d = u.vector(x, y, z);
                    p = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                }
                data[i] = v.sample_raw(p[0], p[1], p[2]);
                i += 1;
            }
        }
    }
    Volume3::new(target_dims, v.spacing(), data)
}

/// One row of a registration trace: the level-resolution loss at the current
/// iterate plus the best selection-loss seen so far (full-resolution loss
/// for the affine stage, total level loss for the deformable stage).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iter: usize,
    pub loss: f64,
    pub best: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegTrace {
    pub entries: Vec<TraceEntry>,
}

impl RegTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,iter,loss,best\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.level, e.iter, e.loss, e.best));
        }
        out
    }

    /// True when the best-so-far column never increases within any level.
    pub fn best_is_monotone_per_level(&self) -> bool {
        let mut last: Option<(usize, f64)> = None;
        for e in &self.entries {
            if let Some((lvl, best)) = last {
                if lvl == e.level && e.best > best {
                    return false;
                }
            }
            last = Some((e.level, e.best));
        }
        true
    }
}

/// Smooth + trilinear downsample for the pyramid; factor 1 is a clone.
fn downsample(v: &Volume3, factor: usize) -> Result<Volume3> {
    if factor == 1 {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let lvl = (
        ((dims.0 - 1) / factor + 1).max(2),
        ((dims.1 - 1) / factor + 1).max(2),
        ((dims.2 - 1) / factor + 1).max(2),
    );
    v.gaussian_smooth(factor as f32 / 2.0)?.resample(lvl)
}

/// Per-axis coordinate scale from one (corner-aligned) grid to another.
fn axis_scale(from: (usize, usize, usize), to: (usize, usize, usize)) -> [f32; 3] {
    let s = |a: usize, b: usize| {
        if a <= 1 {
            1.0
        } else {
            (b - 1) as f32 / (a - 1) as f32
        }
    };
    [s(from.0, to.0), s(from.1, to.1), s(from.2, to.2)]
}

/// Centered-parameter transport between grids: x_to = S·x_from with
/// S = axis_scale, so L' = S L S⁻¹ and t' = S t.
fn carry_centered(
    l: [[f32; 3]; 3],
    t: [f32; 3],
    from: (usize, usize, usize),
    to: (usize, usize, usize),
) -> ([[f32; 3]; 3], [f32; 3]) {
    let s = axis_scale(from, to);
    let mut l2 = l;
    let mut t2 = t;
    for j in 0..3 {
        for k in 0..3 {
            l2[j][k] = l[j][k] * s[j] / s[k];
        }
        t2[j] = t[j] * s[j];
    }
    (l2, t2)
}

/// Warps `moving` onto `dims` with a centered transform, also returning the
/// source-intensity gradient at each sample point for the chain rule.
fn warp_centered_with_grad(
    moving: &Volume3,
    l: [[f32; 3]; 3],
    t: [f32; 3],
    dims: (usize, usize, usize),
    field: Option<&DisplacementField>,
) -> (Vec<f32>, Vec<[f32; 3]>) {
    let (nx, ny, nz) = dims;
    let c = grid_center(dims);
    let n = nx * ny * nz;
    let mut vals = vec![0.0f32; n];
    let mut grads = vec![[0.0f32; 3]; n];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f32 - c[0], y as f32 - c[1], z as f32 - c[2]];
                let mut s = [0.0f32; 3];
                for j in 0..3 {
                    s[j] = c[j] + l[j][0] * p[0] + l[j][1] * p[1] + l[j][2] * p[2] + t[j];
                }
                if let Some(u) = field {
                    let d = u.vector(x, y, z);
                    s = [s[0] + d[0], s[1] + d[1], s[2] + d[2]];
                }
                let (v, g) = moving.sample_with_grad(s[0], s[1], s[2]);
                vals[i] = v;
                grads[i] = g;
                i += 1;
            }
        }
    }
    (vals, grads)
}

/// Adam over a small fixed parameter vector.
struct SmallAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl SmallAdam {
    fn new(n: usize, lr: f64) -> Self {
        SmallAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Stop when the relative loss change over `window` iterations drops below
/// `tol`.
fn converged(losses: &[f64], window: usize, tol: f64) -> bool {
    if losses.len() <= window {
        return false;
    }
    let old = losses[losses.len() - 1 - window];
    let new = losses[losses.len() - 1];
    (old - new).abs() / old.abs().max(1e-12) < tol
}

/// Multi-resolution affine registration. Starts from the identity, runs Adam
/// on the 12 centered-transform entries per pyramid level, and returns the
/// candidate with the lowest full-resolution loss encountered (the identity
/// is the first candidate, so the result never loses to it).
pub fn affine_register(
    fixed: &Volume3,
    moving: &Volume3,
    config: &RegConfig,
) -> Result<(AffineTransform, RegTrace)> {
    config.validate()?;
    let full_dims = fixed.dims();
    let mut trace = RegTrace::default();

    // Full-resolution candidate evaluation, centered parameters.
    let eval_full = |l: [[f32; 3]; 3], t: [f32; 3]| -> Result<f64> {
        let (vals, _) = warp_centered_with_grad(moving, l, t, full_dims, None);
        let (loss, _) = similarity_grad(fixed.data(), &vals, config.similarity)?;
        Ok(loss)
    };

    let ident = AffineTransform::identity().l;
    let mut best_l = ident;
    let mut best_t = [0.0f32; 3];
    let mut best_loss = eval_full(best_l, best_t)?;

    // Centered parameters at the current level, transported between levels.
    let mut cur_l = ident;
    let mut cur_t = [0.0f32; 3];
    let mut cur_dims = full_dims;

    for (level, &factor) in config.factors().iter().enumerate() {
        let fixed_lvl = downsample(fixed, factor)?;
        let moving_lvl = downsample(moving, factor)?;
        let lvl_dims = fixed_lvl.dims();
        (cur_l, cur_t) = carry_centered(cur_l, cur_t, cur_dims, lvl_dims);
        cur_dims = lvl_dims;

        let mut params: Vec<f64> = Vec::with_capacity(12);
        for row in &cur_l {
            params.extend(row.iter().map(|&v| v as f64));
        }
        params.extend(cur_t.iter().map(|&v| v as f64));

        let mut adam = SmallAdam::new(12, config.affine_lr);
        let mut losses = Vec::new();
        let c = grid_center(lvl_dims);

        for iter in 0..config.affine_iters {
            let l = unpack_l(&params);
            let t = unpack_t(&params);

            let (vals, grads) = warp_centered_with_grad(&moving_lvl, l, t, lvl_dims, None);
            let (loss, simg) = similarity_grad(fixed_lvl.data(), &vals, config.similarity)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite affine loss at level {level}, iteration {iter}"
                )));
            }

            // Candidate bookkeeping at full resolution.
            let (lf, tf) = carry_centered(l, t, lvl_dims, full_dims);
            let full_loss = eval_full(lf, tf)?;
            if full_loss < best_loss {
                best_loss = full_loss;
                best_l = lf;
                best_t = tf;
            }
            trace.entries.push(TraceEntry {
                level,
                iter,
                loss,
                best: best_loss,
            });
            losses.push(loss);
            if converged(&losses, config.tol_window, config.tol) {
                break;
            }

            // Chain rule: d loss / d L[j][k] = Σ_x simg(x)·∂m/∂s_j·(x_k − C_k).
            let mut g = vec![0.0f64; 12];
            let (nx, ny, nz) = lvl_dims;
            let mut i = 0usize;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let sg = simg[i] as f64;
                        if sg != 0.0 {
                            let p = [
                                x as f32 - c[0],
                                y as f32 - c[1],
                                z as f32 - c[2],
                            ];
                            for j in 0..3 {
                                let gj = sg * grads[i][j] as f64;
                                g[9 + j] += gj;
                                for k in 0..3 {
                                    g[3 * j + k] += gj * p[k] as f64;
                                }
                            }
                        }
                        i += 1;
                    }
                }
            }
            adam.step(&mut params, &g);
        }

        cur_l = unpack_l(&params);
        cur_t = unpack_t(&params);
    }

    let out = AffineTransform::centered(best_l, best_t, full_dims);
    out.validate()?;
    Ok((out, trace))
}

fn unpack_l(params: &[f64]) -> [[f32; 3]; 3] {
    let mut l = [[0.0f32; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            l[j][k] = params[3 * j + k] as f32;
        }
    }
    l
}

fn unpack_t(params: &[f64]) -> [f32; 3] {
    [params[9] as f32, params[10] as f32, params[11] as f32]
}

/// Dense deformable registration of a (typically affine-prealigned) moving
/// image onto the fixed grid: coarse-to-fine field, per-iteration loss
/// `similarity + λ·mean‖∇u‖²`, max-normalized gradient step of `deform_lr`
/// voxels, then Gaussian field smoothing. Each level keeps the iterate with
/// the best total loss, so the final full-resolution loss never exceeds the
/// initial one.
pub fn deformable_register(
    fixed: &Volume3,
    moving: &Volume3,
    config: &RegConfig,
) -> Result<(DisplacementField, RegTrace)> {
    config.validate()?;
    let mut trace = RegTrace::default();
    let ident = AffineTransform::identity().l;
    let factors = config.factors();

    let mut field: Option<DisplacementField> = None;
    let mut prev_dims = (0usize, 0usize, 0usize);

    for (level, &factor) in factors.iter().enumerate() {
        let fixed_lvl = downsample(fixed, factor)?;
        let moving_lvl = downsample(moving, factor)?;
        let dims = fixed_lvl.dims();
        let mut u = match field.take() {
            Some(f) => f.resample_scaled(dims, axis_scale(prev_dims, dims))?,
            None => DisplacementField::zeros(dims),
        };
        prev_dims = dims;

        let total_loss = |u: &DisplacementField| -> Result<f64> {
            let (vals, _) =
                warp_centered_with_grad(&moving_lvl, ident, [0.0; 3], dims, Some(u));
            let (sim, _) = similarity_grad(fixed_lvl.data(), &vals, config.similarity)?;
            Ok(sim + config.lambda as f64 * u.smoothness())
        };

        let mut best = u.clone();
        let mut best_loss = total_loss(&u)?;
        let mut losses = Vec::new();

        for iter in 0..config.deform_iters {
            let (vals, grads) =
                warp_centered_with_grad(&moving_lvl, ident, [0.0; 3], dims, Some(&u));
            let (sim, simg) = similarity_grad(fixed_lvl.data(), &vals, config.similarity)?;
            let loss = sim + config.lambda as f64 * u.smoothness();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite deformable loss at level {level}, iteration {iter}"
                )));
            }
            if loss < best_loss {
                best_loss = loss;
                best = u.clone();
            }
            trace.entries.push(TraceEntry {
                level,
                iter,
                loss,
                best: best_loss,
            });
            losses.push(loss);
            if converged(&losses, config.tol_window, config.tol) {
                break;
            }

            let g = field_gradient(&u, &grads, &simg, config.lambda);
            let mut max_norm = 0.0f32;
            for v in g.chunks_exact(3) {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                max_norm = max_norm.max(n);
            }
            if max_norm == 0.0 {
                break;
            }
            let step = config.deform_lr / max_norm;
            let mut data = u.data().to_vec();
            for (d, gv) in data.iter_mut().zip(&g) {
                *d -= step * gv;
            }
            u = DisplacementField::new(dims, data)?.smooth(config.sigma)?;
        }

        // Score the last iterate too, then carry the level's best field.
        let final_loss = total_loss(&u)?;
        if final_loss < best_loss {
            best = u;
        }
        field = Some(best);
    }

    Ok((field.expect("at least one level"), trace))
}

/// Gradient of `similarity + λ·mean‖∇u‖²` with respect to the field values.
fn field_gradient(
    u: &DisplacementField,
    moving_grads: &[[f32; 3]],
    simg: &[f32],
    lambda: f32,
) -> Vec<f32> {
    let (nx, ny, nz) = u.dims();
    let n = nx * ny * nz;
    let mut g = vec![0.0f32; n * 3];
    for i in 0..n {
        let sg = simg[i];
        for c in 0..3 {
            g[3 * i + c] = sg * moving_grads[i][c];
        }
    }
    if lambda > 0.0 {
        // d/du_c(x) of Σ diffs² / M: each forward difference contributes
        // −2d/M at its base voxel and +2d/M at its neighbor.
        let m_count = 3 * ((nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1));
        if m_count > 0 {
            let scale = 2.0 * lambda / m_count as f32;
            let idx = |x: usize, y: usize, z: usize| 3 * (x + nx * (y + ny * z));
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = idx(x, y, z);
                        for (dx, dy, dz) in [(1usize, 0usize, 0usize), (0, 1, 0), (0, 0, 1)] {
                            let (xa, ya, za) = (x + dx, y + dy, z + dz);
                            if xa < nx && ya < ny && za < nz {
                                let j = idx(xa, ya, za);
                                for c in 0..3 {
                                    let d = u.data()[j + c] - u.data()[i + c];
                                    g[i + c] -= scale * d;
                                    g[j + c] += scale * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    g
}
