//! Synthetic 3D body phantoms with planted age-dependent anatomy.
//!
//! Each subject is painted on a fixed voxel grid: a torso ellipsoid with a
//! BMI-dependent fat shell, legs, neck, and (for males) widened shoulders,
//! plus three aging structures whose appearance follows linear laws in age:
//! spine disks fade, a heart sphere grows, and back-muscle slabs fade.
//! Nuisance factors (gain, integer translation, torso-axis perturbation,
//! Gaussian noise) are drawn from a per-subject RNG stream so generation is
//! deterministic and order-independent.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{BmiGroup, Manifest, Sex, Split, SubjectRecord, AGE_MAX, AGE_MIN};
use crate::volume::{write_vol, Volume3};

/// Default grid: 32 voxels left-right, 64 head-foot, 24 front-back.
pub const DEFAULT_DIMS: (usize, usize, usize) = (32, 64, 24);

const TORSO_CENTER: [f64; 3] = [16.0, 40.0, 12.0];
const TORSO_RY: f64 = 18.0;
const TORSO_RZ: f64 = 8.0;
const TORSO_INTENSITY: f64 = 0.5;
const FAT_INTENSITY: f64 = 0.9;
const SHOULDER_EXTRA_RX: f64 = 2.0;
/// Shoulder widening applies above this offset from the torso center.
const SHOULDER_CUT_DY: f64 = 9.0;
const LEG_OFFSET_X: f64 = 5.0;
const LEG_RADIUS: f64 = 3.0;
const LEG_LENGTH: i64 = 18;
const NECK_RADIUS: f64 = 2.0;
const NECK_LENGTH: i64 = 5;
const SPINE_DISKS: usize = 9;
const SPINE_RADIUS: f64 = 2.0;
const SPINE_DZ: f64 = 4.0;
/// First disk starts this far below the torso center; disks repeat every 4.
const SPINE_Y0_DY: i64 = -17;
const SPINE_PERIOD: i64 = 4;
const HEART_OFFSET: [f64; 3] = [-3.0, 8.0, -2.0];
const HEART_INTENSITY: f64 = 0.8;
const MUSCLE_DZ: [i64; 2] = [6, 7];
const MUSCLE_DX_INNER: i64 = 3;
const MUSCLE_DX_OUTER: i64 = 6;
const MUSCLE_DY_LO: i64 = -17;
const MUSCLE_DY_HI: i64 = 16;

/// Generation parameters: grid, noise level, aging-law coefficients, and
/// nuisance bounds. `nuisance: false` disables gain, jitter, and noise,
/// yielding the canonical geometry used for ground-truth masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub noise_sigma: f64,
    pub gain_range: (f64, f64),
    pub max_translation: i64,
    pub max_axis_delta: i64,
    /// Spine-disk intensity at age 46 and its per-year decrease.
    pub spine_base: f64,
    pub spine_slope: f64,
    /// Heart radius (voxels) at age 46 and its per-year increase.
    pub heart_base: f64,
    pub heart_slope: f64,
    /// Back-muscle intensity at age 46 and its per-year decrease.
    pub muscle_base: f64,
    pub muscle_slope: f64,
    pub nuisance: bool,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: DEFAULT_DIMS,
            spacing: (1.0, 1.0, 1.0),
            noise_sigma: 0.02,
            gain_range: (0.95, 1.05),
            max_translation: 2,
            max_axis_delta: 1,
            spine_base: 0.95,
            spine_slope: 0.006,
            heart_base: 3.0,
            heart_slope: 0.04,
            muscle_base: 0.85,
            muscle_slope: 0.004,
            nuisance: true,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.0 == 0 || self.dims.1 == 0 || self.dims.2 == 0 {
            return Err(Error::InvalidArgument("phantom dims must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.gain_range.0 > 0.0 && self.gain_range.1 >= self.gain_range.0) {
            return Err(Error::InvalidArgument(format!(
                "gain range must be positive and ordered, got {:?}",
                self.gain_range
            )));
        }
        if self.max_translation < 0 || self.max_axis_delta < 0 {
            return Err(Error::InvalidArgument("jitter bounds must be >= 0".into()));
        }
        Ok(())
    }

    fn spine_intensity(&self, age: u32) -> f64 {
        self.spine_base - self.spine_slope * f64::from(age - AGE_MIN)
    }

    fn heart_radius(&self, age: u32) -> f64 {
        self.heart_base + self.heart_slope * f64::from(age - AGE_MIN)
    }

    fn muscle_intensity(&self, age: u32) -> f64 {
        self.muscle_base - self.muscle_slope * f64::from(age - AGE_MIN)
    }
}

/// Binary masks describing where the planted signal lives, in the same
/// geometry (including jitter) as the subject volume they accompany.
/// `aging_mask` is the union of the three structure masks, with the heart
/// taken at its maximal (oldest-age) radius so no true signal voxel is
/// missed; `body_mask` covers every non-background voxel.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub aging_mask: Volume3,
    pub body_mask: Volume3,
    pub spine_mask: Volume3,
    pub heart_mask: Volume3,
    pub muscle_mask: Volume3,
}

/// Torso geometry after nuisance jitter has been applied.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    center: [f64; 3],
    rx: f64,
    ry: f64,
    rz: f64,
    shoulder_extra: f64,
    /// Fat-shell thickness in voxels (semi-axis shrink for the interior).
    shell: f64,
}

impl Geometry {
    fn build(bmi: BmiGroup, sex: Sex, translation: [i64; 3], axis_delta: i64) -> Geometry {
        let (rx, shell) = match bmi {
            BmiGroup::Healthy => (10.0, 1.0),
            BmiGroup::Overweight => (12.0, 2.0),
            BmiGroup::Obese => (14.0, 3.0),
        };
        Geometry {
            center: [
                TORSO_CENTER[0] + translation[0] as f64,
                TORSO_CENTER[1] + translation[1] as f64,
                TORSO_CENTER[2] + translation[2] as f64,
            ],
            rx,
            ry: TORSO_RY + axis_delta as f64,
            rz: TORSO_RZ,
            shoulder_extra: match sex {
                Sex::M => SHOULDER_EXTRA_RX,
                Sex::F => 0.0,
            },
            shell,
        }
    }

    /// Normalized ellipsoid coordinate with semi-axes shrunk by `shrink`;
    /// <= 1 means inside. The x semi-axis widens above the shoulder cut.
    fn ellipsoid(&self, x: f64, y: f64, z: f64, shrink: f64) -> f64 {
        let mut rx = self.rx;
        if y >= self.center[1] + SHOULDER_CUT_DY {
            rx += self.shoulder_extra;
        }
        let dx = (x - self.center[0]) / (rx - shrink);
        let dy = (y - self.center[1]) / (self.ry - shrink);
        let dz = (z - self.center[2]) / (self.rz - shrink);
        dx * dx + dy * dy + dz * dz
    }

    fn in_torso(&self, x: f64, y: f64, z: f64) -> bool {
        self.ellipsoid(x, y, z, 0.0) <= 1.0
    }

    /// Inside the torso but not in the fat shell.
    fn in_interior(&self, x: f64, y: f64, z: f64) -> bool {
        self.ellipsoid(x, y, z, self.shell) <= 1.0
    }

    /// At least one voxel inside the torso surface: the containment margin
    /// for aging structures, independent of the fat-shell thickness.
    fn in_margin(&self, x: f64, y: f64, z: f64) -> bool {
        self.ellipsoid(x, y, z, 1.0) <= 1.0
    }

    fn in_legs(&self, x: f64, y: i64, z: f64) -> bool {
        let bottom = (self.center[1] - self.ry).round() as i64;
        if y >= bottom || y < bottom - LEG_LENGTH {
            return false;
        }
        let dz = z - self.center[2];
        for side in [-1.0, 1.0] {
            let dx = x - (self.center[0] + side * LEG_OFFSET_X);
            if dx * dx + dz * dz <= LEG_RADIUS * LEG_RADIUS {
                return true;
            }
        }
        false
    }

    fn in_neck(&self, x: f64, y: i64, z: f64) -> bool {
        let top = (self.center[1] + self.ry).round() as i64;
        if y <= top || y > top + NECK_LENGTH {
            return false;
        }
        let dx = x - self.center[0];
        let dz = z - self.center[2];
        dx * dx + dz * dz <= NECK_RADIUS * NECK_RADIUS
    }

    fn in_spine(&self, x: f64, y: i64, z: f64) -> bool {
        let dx = x - self.center[0];
        let dz = z - (self.center[2] + SPINE_DZ);
        if dx * dx + dz * dz > SPINE_RADIUS * SPINE_RADIUS {
            return false;
        }
        let y0 = self.center[1].round() as i64 + SPINE_Y0_DY;
        let dy = y - y0;
        if dy < 0 || dy >= SPINE_PERIOD * SPINE_DISKS as i64 {
            return false;
        }
        dy % SPINE_PERIOD < 2
    }

    fn in_muscle(&self, x: i64, y: i64, z: i64) -> bool {
        let cx = self.center[0].round() as i64;
        let cy = self.center[1].round() as i64;
        let cz = self.center[2].round() as i64;
        let dz = z - cz;
        if dz != MUSCLE_DZ[0] && dz != MUSCLE_DZ[1] {
            return false;
        }
        let dy = y - cy;
        if dy < MUSCLE_DY_LO || dy > MUSCLE_DY_HI {
            return false;
        }
        let adx = (x - cx).abs();
        (MUSCLE_DX_INNER..=MUSCLE_DX_OUTER).contains(&adx)
    }

    fn heart_center(&self) -> [f64; 3] {
        [
            self.center[0] + HEART_OFFSET[0],
            self.center[1] + HEART_OFFSET[1],
            self.center[2] + HEART_OFFSET[2],
        ]
    }

    fn heart_dist2(&self, x: f64, y: f64, z: f64) -> f64 {
        let h = self.heart_center();
        let dx = x - h[0];
        let dy = y - h[1];
        let dz = z - h[2];
        dx * dx + dy * dy + dz * dz
    }
}

/// Paints the noiseless phantom for one geometry and age. Aging structures
/// are clipped to a 1-voxel inset of the torso so the aging mask is always
/// strictly inside the body; where the fat shell is thicker than that inset
/// they carve into it, so shell-value checks must exempt aging voxels.
fn paint(params: &PhantomParams, geo: &Geometry, age: u32) -> (Vec<f64>, GroundTruth) {
    let (nx, ny, nz) = params.dims;
    let n = nx * ny * nz;
    let mut image = vec![0.0f64; n];
    let mut body = vec![0.0f32; n];
    let mut spine = vec![0.0f32; n];
    let mut heart = vec![0.0f32; n];
    let mut muscle = vec![0.0f32; n];
    let mut aging = vec![0.0f32; n];

    let spine_val = params.spine_intensity(age);
    let muscle_val = params.muscle_intensity(age);
    let r = params.heart_radius(age);
    let r_max = params.heart_radius(AGE_MAX);

    let mut idx = 0usize;
    for zi in 0..nz {
        let z = zi as f64;
        for yi in 0..ny {
            let y = yi as f64;
            for xi in 0..nx {
                let x = xi as f64;
                let mut v = 0.0f64;
                if geo.in_torso(x, y, z) {
                    v = if geo.in_interior(x, y, z) {
                        TORSO_INTENSITY
                    } else {
                        FAT_INTENSITY
                    };
                    if geo.in_margin(x, y, z) {
                        let mut is_aging = false;
                        if geo.in_spine(x, yi as i64, z) {
                            v = spine_val;
                            spine[idx] = 1.0;
                            is_aging = true;
                        }
                        if geo.in_muscle(xi as i64, yi as i64, zi as i64) {
                            v = muscle_val;
                            muscle[idx] = 1.0;
                            is_aging = true;
                        }
                        let d2 = geo.heart_dist2(x, y, z);
                        if d2 <= r * r {
                            v = HEART_INTENSITY;
                        }
                        if d2 <= r_max * r_max {
                            heart[idx] = 1.0;
                            is_aging = true;
                        }
                        if is_aging {
                            aging[idx] = 1.0;
                        }
                    }
                } else if geo.in_legs(x, yi as i64, z) || geo.in_neck(x, yi as i64, z) {
                    v = TORSO_INTENSITY;
                }
                if v > 0.0 {
                    body[idx] = 1.0;
                }
                image[idx] = v;
                idx += 1;
            }
        }
    }

    let mask = |data: Vec<f32>| {
        Volume3::new(params.dims, params.spacing, data).expect("mask construction")
    };
    let gt = GroundTruth {
        aging_mask: mask(aging),
        body_mask: mask(body),
        spine_mask: mask(spine),
        heart_mask: mask(heart),
        muscle_mask: mask(muscle),
    };
    (image, gt)
}

fn subject_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn validate_age(age: u32) -> Result<()> {
    if !(AGE_MIN..=AGE_MAX).contains(&age) {
        return Err(Error::InvalidArgument(format!(
            "age {age} outside [{AGE_MIN}, {AGE_MAX}]"
        )));
    }
    Ok(())
}

/// Generates one subject volume plus its ground truth. Deterministic given
/// `(params.seed, id)`; nuisance draws happen in a fixed order (gain,
/// translation, axis perturbation, per-voxel noise).
pub fn generate_subject(
    params: &PhantomParams,
    id: u64,
    age: u32,
    sex: Sex,
    bmi: BmiGroup,
) -> Result<(Volume3, GroundTruth)> {
    params.validate()?;
    validate_age(age)?;

    let mut rng = subject_rng(params.seed, id);
    let (gain, translation, axis_delta) = if params.nuisance {
        let gain = rng.gen_range(params.gain_range.0..=params.gain_range.1);
        let t = params.max_translation;
        let translation = [
            rng.gen_range(-t..=t),
            rng.gen_range(-t..=t),
            rng.gen_range(-t..=t),
        ];
        let a = params.max_axis_delta;
        (gain, translation, rng.gen_range(-a..=a))
    } else {
        (1.0, [0, 0, 0], 0)
    };

    let geo = Geometry::build(bmi, sex, translation, axis_delta);
    let (mut image, gt) = paint(params, &geo, age);

    if params.nuisance {
        let noise = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
        for v in image.iter_mut() {
            *v = (*v * gain + noise.sample(&mut rng)).clamp(0.0, 1.2);
        }
    }

    let data: Vec<f32> = image.into_iter().map(|v| v as f32).collect();
    let volume = Volume3::new(params.dims, params.spacing, data)?;
    Ok((volume, gt))
}

/// Ground truth in canonical geometry (no jitter) for one sex x BMI cell.
/// The masks are age-independent: the heart mask always uses the maximal
/// radius.
pub fn canonical_ground_truth(params: &PhantomParams, sex: Sex, bmi: BmiGroup) -> Result<GroundTruth> {
    params.validate()?;
    let geo = Geometry::build(bmi, sex, [0, 0, 0], 0);
    let (_, gt) = paint(params, &geo, AGE_MIN);
    Ok(gt)
}

/// One planned cohort entry before any volume is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedSubject {
    pub id: u64,
    pub age: u32,
    pub sex: Sex,
    pub bmi_group: BmiGroup,
    pub split: Split,
}

/// Plans a balanced cohort: every split divides evenly over the six
/// sex x BMI cells, and within each cell ages are stratified uniformly over
/// the valid range. IDs run 0..total in (split, sex, BMI) order.
pub fn cohort_plan(n_train: usize, n_val: usize, n_test: usize) -> Result<Vec<PlannedSubject>> {
    for (name, n) in [("n_train", n_train), ("n_val", n_val), ("n_test", n_test)] {
        if n % 6 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{name} = {n} is not divisible by 6 (sex x BMI cells)"
            )));
        }
    }
    let span = (AGE_MAX - AGE_MIN + 1) as usize;
    let mut plan = Vec::with_capacity(n_train + n_val + n_test);
    let mut id = 0u64;
    for (split, n) in [
        (Split::Train, n_train),
        (Split::Val, n_val),
        (Split::Test, n_test),
    ] {
        let per_cell = n / 6;
        for sex in [Sex::F, Sex::M] {
            for bmi in BmiGroup::ALL {
                for i in 0..per_cell {
                    let age = AGE_MIN
                        + (((i as f64 + 0.5) * span as f64 / per_cell as f64).floor() as u32)
                            .min(span as u32 - 1);
                    plan.push(PlannedSubject {
                        id,
                        age,
                        sex,
                        bmi_group: bmi,
                        split,
                    });
                    id += 1;
                }
            }
        }
    }
    Ok(plan)
}

fn image_rel_path(id: u64) -> PathBuf {
    PathBuf::from(format!("images/subj_{id:05}.vol"))
}

fn gt_rel_path(sex: Sex, bmi: BmiGroup, kind: &str) -> PathBuf {
    let s = match sex {
        Sex::F => "f",
        Sex::M => "m",
    };
    PathBuf::from(format!("gt/{s}_{bmi}_{kind}.vol"))
}

/// Renders the planned cohort to `out_dir`: one `.vol` per subject,
/// canonical ground-truth masks per sex x BMI cell, and a JSON-lines
/// manifest. Subject rendering is parallel; outputs are byte-identical
/// regardless of thread count.
pub fn generate_cohort(
    params: &PhantomParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    params.validate()?;
    let out_dir = out_dir.as_ref();
    let plan = cohort_plan(n_train, n_val, n_test)?;

    let images_dir = out_dir.join("images");
    let gt_dir = out_dir.join("gt");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;

    plan.par_iter().try_for_each(|p| -> Result<()> {
        let (volume, _) = generate_subject(params, p.id, p.age, p.sex, p.bmi_group)?;
        write_vol(&volume, out_dir.join(image_rel_path(p.id)))
    })?;

    for sex in [Sex::F, Sex::M] {
        for bmi in BmiGroup::ALL {
            let gt = canonical_ground_truth(params, sex, bmi)?;
            write_vol(&gt.aging_mask, out_dir.join(gt_rel_path(sex, bmi, "aging")))?;
            write_vol(&gt.body_mask, out_dir.join(gt_rel_path(sex, bmi, "body")))?;
        }
    }

    let records: Vec<SubjectRecord> = plan
        .iter()
        .map(|p| SubjectRecord {
            id: p.id,
            age: p.age,
            sex: p.sex,
            bmi_group: p.bmi_group,
            split: p.split,
            image_path: image_rel_path(p.id),
            cam_path: None,
            field_path: None,
            predicted_age: None,
            corrected_age: None,
        })
        .collect();
    let manifest = Manifest::new(records, out_dir)?;
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Relative path of a cell's canonical aging or body mask, as written by
/// `generate_cohort`.
pub fn cell_mask_path(sex: Sex, bmi: BmiGroup, body: bool) -> PathBuf {
    gt_rel_path(sex, bmi, if body { "body" } else { "aging" })
}
