//! Group stratification and population importance atlases.
//!
//! Subjects are grouped by sex x BMI cell, age band, or prediction-gap band;
//! every member of a group is registered to a common target subject, the
//! identical transform warps the member's image and its importance map, and
//! the warped volumes are averaged voxel-wise into an [`ImportanceAtlas`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{BmiGroup, Manifest, Sex, SubjectRecord};
use crate::registration::{
    affine_register, compose_with_affine, deformable_register, warp, AffineTransform,
    DisplacementField, RegConfig,
};
use crate::volume::{overlay_slice, read_vol, write_vol, Axis, Volume3};

/// Minimum fraction of group members that must register successfully for the
/// atlas to be built (4 of 5); below that the build aborts.
const MIN_SUCCESS_NUM: usize = 4;
const MIN_SUCCESS_DEN: usize = 5;

/// Age bands partitioning the cohort: `< 60`, `[60, 70)`, `>= 70` years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBand {
    Under60,
    Sixties,
    SeventyPlus,
}

impl AgeBand {
    pub const ALL: [AgeBand; 3] = [AgeBand::Under60, AgeBand::Sixties, AgeBand::SeventyPlus];

    /// Band containing `age`; the boundaries belong to the upper band.
    pub fn of(age: u32) -> AgeBand {
        if age < 60 {
            AgeBand::Under60
        } else if age < 70 {
            AgeBand::Sixties
        } else {
            AgeBand::SeventyPlus
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBand::Under60 => "age_lt60",
            AgeBand::Sixties => "age_60_70",
            AgeBand::SeventyPlus => "age_ge70",
        }
    }
}

/// Prediction-gap bands over Δ = corrected prediction − chronological age.
/// Subjects between the aligned and extreme thresholds stay unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapBand {
    Decelerated,
    Aligned,
    Accelerated,
}

impl GapBand {
    pub const ALL: [GapBand; 3] = [GapBand::Decelerated, GapBand::Aligned, GapBand::Accelerated];

    /// Band for a prediction gap, or `None` when the gap falls between the
    /// aligned and extreme thresholds.
    pub fn of(delta: f64, thresholds: &GapThresholds) -> Option<GapBand> {
        if delta.abs() < thresholds.aligned {
            Some(GapBand::Aligned)
        } else if delta > thresholds.extreme {
            Some(GapBand::Accelerated)
        } else if delta < -thresholds.extreme {
            Some(GapBand::Decelerated)
        } else {
            None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GapBand::Decelerated => "gap_decelerated",
            GapBand::Aligned => "gap_aligned",
            GapBand::Accelerated => "gap_accelerated",
        }
    }
}

/// Thresholds (in years) for the prediction-gap bands: |Δ| < `aligned` counts
/// as aligned, Δ > `extreme` as accelerated, Δ < −`extreme` as decelerated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapThresholds {
    pub aligned: f64,
    pub extreme: f64,
}

impl Default for GapThresholds {
    fn default() -> Self {
        GapThresholds {
            aligned: 0.5,
            extreme: 4.0,
        }
    }
}

impl GapThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.aligned.is_finite() && self.extreme.is_finite())
            || self.aligned <= 0.0
            || self.extreme <= self.aligned
        {
            return Err(Error::InvalidArgument(
                "gap thresholds require 0 < aligned < extreme".into(),
            ));
        }
        Ok(())
    }
}

/// Identifies one subject group: a sex x BMI cell, an age band, a gap band,
/// or an intersection of those components (at least one is set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<(Sex, BmiGroup)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_band: Option<AgeBand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_band: Option<GapBand>,
}

impl GroupKey {
    pub fn cell(sex: Sex, bmi: BmiGroup) -> GroupKey {
        GroupKey {
            cell: Some((sex, bmi)),
            age_band: None,
            gap_band: None,
        }
    }

    pub fn age(band: AgeBand) -> GroupKey {
        GroupKey {
            cell: None,
            age_band: Some(band),
            gap_band: None,
        }
    }

    pub fn gap(band: GapBand) -> GroupKey {
        GroupKey {
            cell: None,
            age_band: None,
            gap_band: Some(band),
        }
    }

    /// Directory-safe name: `f_healthy`, `age_lt60`, `gap_accelerated`, or a
    /// `_`-joined combination for intersection keys.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some((sex, bmi)) = self.cell {
            let s = match sex {
                Sex::F => "f",
                Sex::M => "m",
            };
            parts.push(format!("{s}_{bmi}"));
        }
        if let Some(band) = self.age_band {
            parts.push(band.label().to_string());
        }
        if let Some(band) = self.gap_band {
            parts.push(band.label().to_string());
        }
        if parts.is_empty() {
            "all".to_string()
        } else {
            parts.join("_")
        }
    }
}

/// Stratification schemes. Sex x BMI and age bands partition all records;
/// gap bands leave mid-gap subjects unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SexBmi,
    AgeBand,
    GapBand,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::SexBmi, Scheme::AgeBand, Scheme::GapBand];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::SexBmi => "sex_bmi",
            Scheme::AgeBand => "age_band",
            Scheme::GapBand => "gap_band",
        }
    }
}

/// Deterministically partitions the manifest's records under one scheme.
/// Gap stratification needs every record's corrected prediction and drops
/// subjects whose gap falls between the aligned and extreme thresholds.
pub fn stratify(
    manifest: &Manifest,
    scheme: Scheme,
    thresholds: &GapThresholds,
) -> Result<BTreeMap<GroupKey, Vec<SubjectRecord>>> {
    thresholds.validate()?;
    let mut groups: BTreeMap<GroupKey, Vec<SubjectRecord>> = BTreeMap::new();
    for r in &manifest.records {
        let key = match scheme {
            Scheme::SexBmi => Some(GroupKey::cell(r.sex, r.bmi_group)),
            Scheme::AgeBand => Some(GroupKey::age(AgeBand::of(r.age))),
            Scheme::GapBand => {
                let corrected = r.corrected_age.ok_or_else(|| {
                    Error::MissingArtifact(format!(
                        "subject {} has no corrected prediction; gap stratification needs the bias stage",
                        r.id
                    ))
                })?;
                GapBand::of(corrected - r.age as f64, thresholds).map(GroupKey::gap)
            }
        };
        if let Some(key) = key {
            groups.entry(key).or_default().push(r.clone());
        }
    }
    Ok(groups)
}

/// Picks the registration target: the member whose age is closest to the
/// group's median age (even counts use the mean of the two middle ages),
/// ties broken by the lowest id.
pub fn select_target(members: &[SubjectRecord]) -> Result<u64> {
    if members.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot select a registration target from an empty group".into(),
        ));
    }
    let mut ages: Vec<f64> = members.iter().map(|m| m.age as f64).collect();
    ages.sort_by(f64::total_cmp);
    let n = ages.len();
    let median = if n % 2 == 1 {
        ages[n / 2]
    } else {
        (ages[n / 2 - 1] + ages[n / 2]) / 2.0
    };
    let best = members
        .iter()
        .min_by(|a, b| {
            let da = (a.age as f64 - median).abs();
            let db = (b.age as f64 - median).abs();
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        })
        .expect("non-empty group");
    Ok(best.id)
}

/// The (affine, displacement field) pair carrying one member onto the target
/// grid in a single warp: `out(x) = member(L·x + t + u(x))`.
#[derive(Debug, Clone)]
pub struct MemberTransform {
    pub affine: AffineTransform,
    pub field: DisplacementField,
}

impl MemberTransform {
    pub fn identity(dims: (usize, usize, usize)) -> MemberTransform {
        MemberTransform {
            affine: AffineTransform::identity(),
            field: DisplacementField::zeros(dims),
        }
    }

    /// True when applying the transform samples every voxel at its own
    /// integer coordinate, so volumes pass through unchanged (and bit-exact).
    pub fn is_identity(&self) -> bool {
        self.affine == AffineTransform::identity() && self.field.data().iter().all(|&v| v == 0.0)
    }

    /// Warps a member volume (image or importance map) onto the target grid.
    pub fn apply(&self, v: &Volume3, target_dims: (usize, usize, usize)) -> Result<Volume3> {
        if self.is_identity() && v.dims() == target_dims {
            return Ok(v.clone());
        }
        warp(v, &self.affine, Some(&self.field), target_dims)
    }

    pub fn save(&self, dir: &Path, id: u64) -> Result<()> {
        self.affine.save(affine_sidecar(dir, id))?;
        self.field.save(field_sidecar(dir, id))
    }

    /// Loads persisted sidecars; `None` when either file is absent, unreadable,
    /// or the field does not match the target grid — callers then re-register.
    pub fn load(dir: &Path, id: u64, target_dims: (usize, usize, usize)) -> Option<MemberTransform> {
        let affine = AffineTransform::load(affine_sidecar(dir, id)).ok()?;
        let field = DisplacementField::load(field_sidecar(dir, id)).ok()?;
        (field.dims() == target_dims).then_some(MemberTransform { affine, field })
    }
}

/// Sidecar path for one member's affine transform.
pub fn affine_sidecar(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("subj_{id:05}.affine.json"))
}

/// Sidecar path for one member's composed displacement field.
pub fn field_sidecar(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("subj_{id:05}.dfield"))
}

/// Registers one member image to the target: affine first, then deformable on
/// the affine-prewarped member, returning the composed single-warp transform.
pub fn register_member(
    target: &Volume3,
    member: &Volume3,
    config: &RegConfig,
) -> Result<MemberTransform> {
    let (affine, _) = affine_register(target, member, config)?;
    let prewarped = warp(member, &affine, None, target.dims())?;
    let (field, _) = deformable_register(target, &prewarped, config)?;
    let composed = compose_with_affine(&affine, &field);
    Ok(MemberTransform {
        affine,
        field: composed,
    })
}

/// One member that could not be carried into the atlas, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFailure {
    pub id: u64,
    pub reason: String,
}

/// The JSON record persisted with every atlas bundle (`group.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRecord {
    pub key: GroupKey,
    pub target_id: u64,
    /// Members whose warped image and map entered the means, id-sorted
    /// (the target always contributes).
    pub contributors: Vec<u64>,
    pub failures: Vec<GroupFailure>,
}

/// Outcome of the registration-only pass over one group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRegistration {
    pub key: GroupKey,
    pub target_id: u64,
    /// Non-target members whose transform sidecars are on disk, id-sorted.
    pub registered: Vec<u64>,
    pub failures: Vec<GroupFailure>,
}

/// A population importance atlas: the anatomical mean image and the mean
/// importance map over all contributors, in the target subject's geometry.
#[derive(Debug, Clone)]
pub struct ImportanceAtlas {
    pub key: GroupKey,
    pub target_id: u64,
    pub n_contributors: usize,
    pub mean_image: Volume3,
    pub mean_cam: Volume3,
}

impl ImportanceAtlas {
    pub fn validate(&self) -> Result<()> {
        if self.n_contributors == 0 {
            return Err(Error::InvalidArgument(
                "an atlas needs at least one contributor".into(),
            ));
        }
        if self.mean_image.dims() != self.mean_cam.dims() {
            return Err(Error::ShapeMismatch(format!(
                "atlas image dims {:?} != importance dims {:?}",
                self.mean_image.dims(),
                self.mean_cam.dims()
            )));
        }
        if let Some(i) = self
            .mean_cam
            .data()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Numerical(format!(
                "mean importance value {} at index {i} outside [0, 1]",
                self.mean_cam.data()[i]
            )));
        }
        Ok(())
    }
}

/// Result of building one group atlas.
#[derive(Debug)]
pub struct GroupBuild {
    pub atlas: ImportanceAtlas,
    pub record: GroupRecord,
}

/// Importance maps enter atlases normalized; values must already be in [0, 1].
fn check_cam(cam: &Volume3, image_dims: (usize, usize, usize)) -> std::result::Result<(), String> {
    if cam.dims() != image_dims {
        return Err(format!(
            "importance map dims {:?} do not match image dims {image_dims:?}",
            cam.dims()
        ));
    }
    if let Some(i) = cam.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!(
            "importance map value {} at index {i} outside [0, 1]; atlases aggregate normalized maps",
            cam.data()[i]
        ));
    }
    Ok(())
}

/// Obtains transforms for every non-target member, reusing persisted sidecars
/// when they match the target grid and registering (then persisting) the rest.
/// Members run in parallel; results are reduced in canonical id order.
fn member_transforms(
    manifest: &Manifest,
    members: &[&SubjectRecord],
    target_img: &Volume3,
    config: &RegConfig,
    transforms_dir: &Path,
    check_cams: bool,
) -> Result<(BTreeMap<u64, MemberTransform>, Vec<GroupFailure>)> {
    fs::create_dir_all(transforms_dir).map_err(|e| Error::io(transforms_dir, e))?;
    let mut ordered: Vec<&SubjectRecord> = members.to_vec();
    ordered.sort_by_key(|m| m.id);

    let prepare = |m: &SubjectRecord| -> std::result::Result<MemberTransform, String> {
        let image = read_vol(manifest.resolve(&m.image_path)).map_err(|e| e.to_string())?;
        if check_cams {
            let cam_rel = m.cam_path.as_ref().expect("cam_path checked by caller");
            let cam = read_vol(manifest.resolve(cam_rel)).map_err(|e| e.to_string())?;
            check_cam(&cam, image.dims())?;
        }
        match MemberTransform::load(transforms_dir, m.id, target_img.dims()) {
            Some(t) => Ok(t),
            None => {
                let t = register_member(target_img, &image, config).map_err(|e| e.to_string())?;
                t.save(transforms_dir, m.id).map_err(|e| e.to_string())?;
                Ok(t)
            }
        }
    };

    let results: Vec<(u64, std::result::Result<MemberTransform, String>)> =
        ordered.par_iter().map(|m| (m.id, prepare(m))).collect();

    let mut transforms = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, outcome) in results {
        match outcome {
            Ok(t) => {
                transforms.insert(id, t);
            }
            Err(reason) => failures.push(GroupFailure { id, reason }),
        }
    }
    Ok((transforms, failures))
}

fn target_record(members: &[SubjectRecord], target_id: u64) -> &SubjectRecord {
    members
        .iter()
        .find(|m| m.id == target_id)
        .expect("target selected from members")
}

/// Registers every non-target member of a group to its median-age target and
/// persists the transform sidecars without aggregating anything; a later
/// [`build_group`] call on the same directory reuses them.
pub fn register_group(
    manifest: &Manifest,
    members: &[SubjectRecord],
    key: GroupKey,
    config: &RegConfig,
    transforms_dir: impl AsRef<Path>,
) -> Result<GroupRegistration> {
    config.validate()?;
    let target_id = select_target(members)?;
    let target = target_record(members, target_id);
    let target_img = read_vol(manifest.resolve(&target.image_path))?;
    let rest: Vec<&SubjectRecord> = members.iter().filter(|m| m.id != target_id).collect();
    let (transforms, failures) = member_transforms(
        manifest,
        &rest,
        &target_img,
        config,
        transforms_dir.as_ref(),
        false,
    )?;
    Ok(GroupRegistration {
        key,
        target_id,
        registered: transforms.keys().copied().collect(),
        failures,
    })
}

fn add_scaled(sum: &mut [f64], data: &[f32]) {
    for (s, &v) in sum.iter_mut().zip(data) {
        *s += v as f64;
    }
}

/// Accumulates an importance map, clamping to [0, 1]: inputs are validated to
/// that range, but trilinear weights can round a warped value a hair outside
/// the convex hull of its neighbors.
fn add_cam(sum: &mut [f64], data: &[f32]) {
    for (s, &v) in sum.iter_mut().zip(data) {
        *s += v.clamp(0.0, 1.0) as f64;
    }
}

/// Builds one group atlas: selects the target, registers every other member
/// (reusing persisted transforms from `transforms_dir` when present), warps
/// each member's image and importance map with the identical transform, and
/// averages the results voxel-wise in f64 over id-sorted contributors. The
/// bundle (`mean_image.vol`, `mean_cam.vol`, `group.json`) is written to
/// `bundle_dir`. Aborts unless at least 4/5 of the members make it in.
pub fn build_group(
    manifest: &Manifest,
    members: &[SubjectRecord],
    key: GroupKey,
    config: &RegConfig,
    transforms_dir: impl AsRef<Path>,
    bundle_dir: impl AsRef<Path>,
) -> Result<GroupBuild> {
    config.validate()?;
    if members.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "group {} has no members",
            key.label()
        )));
    }
    for m in members {
        if m.cam_path.is_none() {
            return Err(Error::MissingArtifact(format!(
                "subject {} has no cam_path in the manifest; extract importance maps before building the {} atlas",
                m.id,
                key.label()
            )));
        }
    }

    let target_id = select_target(members)?;
    let target = target_record(members, target_id);
    let target_img = read_vol(manifest.resolve(&target.image_path))?;
    let target_cam = read_vol(manifest.resolve(target.cam_path.as_ref().expect("checked")))?;
    check_cam(&target_cam, target_img.dims())
        .map_err(|reason| Error::InvalidArgument(format!("target {target_id}: {reason}")))?;
    let dims = target_img.dims();

    let rest: Vec<&SubjectRecord> = members.iter().filter(|m| m.id != target_id).collect();
    let (transforms, failures) = member_transforms(
        manifest,
        &rest,
        &target_img,
        config,
        transforms_dir.as_ref(),
        true,
    )?;

    // The target always contributes (identity transform).
    let ok = transforms.len() + 1;
    if ok * MIN_SUCCESS_DEN < members.len() * MIN_SUCCESS_NUM {
        return Err(Error::Numerical(format!(
            "atlas {} aborted: only {ok} of {} members registered ({} failures)",
            key.label(),
            members.len(),
            failures.len()
        )));
    }

    let mut contributors: Vec<u64> = transforms.keys().copied().collect();
    contributors.push(target_id);
    contributors.sort_unstable();

    let by_id: BTreeMap<u64, &SubjectRecord> = members.iter().map(|m| (m.id, m)).collect();
    let voxels = dims.0 * dims.1 * dims.2;
    let mut sum_img = vec![0.0f64; voxels];
    let mut sum_cam = vec![0.0f64; voxels];
    for &id in &contributors {
        if id == target_id {
            add_scaled(&mut sum_img, target_img.data());
            add_cam(&mut sum_cam, target_cam.data());
        } else {
            let m = by_id[&id];
            let t = &transforms[&id];
            let image = read_vol(manifest.resolve(&m.image_path))?;
            let cam = read_vol(manifest.resolve(m.cam_path.as_ref().expect("checked")))?;
            add_scaled(&mut sum_img, t.apply(&image, dims)?.data());
            add_cam(&mut sum_cam, t.apply(&cam, dims)?.data());
        }
    }
    let n = contributors.len() as f64;
    let img_mean: Vec<f32> = sum_img.iter().map(|&s| (s / n) as f32).collect();
    let cam_mean: Vec<f32> = sum_cam.iter().map(|&s| (s / n) as f32).collect();

    let atlas = ImportanceAtlas {
        key,
        target_id,
        n_contributors: contributors.len(),
        mean_image: Volume3::new(dims, target_img.spacing(), img_mean)?,
        mean_cam: Volume3::new(dims, target_img.spacing(), cam_mean)?,
    };
    atlas.validate()?;
    let record = GroupRecord {
        key,
        target_id,
        contributors,
        failures,
    };
    save_bundle(&atlas, &record, bundle_dir.as_ref())?;
    Ok(GroupBuild { atlas, record })
}

fn save_bundle(atlas: &ImportanceAtlas, record: &GroupRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_vol(&atlas.mean_image, dir.join("mean_image.vol"))?;
    write_vol(&atlas.mean_cam, dir.join("mean_cam.vol"))?;
    let path = dir.join("group.json");
    let mut text = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Manifest(format!("group record: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads an atlas bundle written by [`build_group`].
pub fn load_atlas(bundle_dir: impl AsRef<Path>) -> Result<(ImportanceAtlas, GroupRecord)> {
    let dir = bundle_dir.as_ref();
    let path = dir.join("group.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: GroupRecord = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("group record {}: {e}", path.display())))?;
    let atlas = ImportanceAtlas {
        key: record.key,
        target_id: record.target_id,
        n_contributors: record.contributors.len(),
        mean_image: read_vol(dir.join("mean_image.vol"))?,
        mean_cam: read_vol(dir.join("mean_cam.vol"))?,
    };
    atlas.validate()?;
    Ok((atlas, record))
}

/// Which slices an atlas report renders, as voxel indices per anatomical
/// plane, plus the overlay blend weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePlan {
    pub axial: Vec<usize>,
    pub coronal: Vec<usize>,
    pub sagittal: Vec<usize>,
    pub alpha: f32,
}

impl SlicePlan {
    /// Three slices per plane at the quarter positions of each axis.
    pub fn default_for(dims: (usize, usize, usize)) -> SlicePlan {
        let quarters = |n: usize| vec![n / 4, n / 2, (3 * n) / 4];
        SlicePlan {
            axial: quarters(dims.1),
            coronal: quarters(dims.2),
            sagittal: quarters(dims.0),
            alpha: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "overlay alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Renders one overlay panel per configured slice (hot-colormapped importance
/// over the grayscale mean image) into `out_dir`, named
/// `<plane>_<index>.ppm`. Returns the written paths.
pub fn render_atlas_report(
    atlas: &ImportanceAtlas,
    plan: &SlicePlan,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    atlas.validate()?;
    plan.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (axis, indices) in [
        (Axis::Y, &plan.axial),
        (Axis::Z, &plan.coronal),
        (Axis::X, &plan.sagittal),
    ] {
        for &index in indices {
            let path = out_dir.join(format!("{}_{index:03}.ppm", axis.label()));
            overlay_slice(&atlas.mean_image, &atlas.mean_cam, axis, index, plan.alpha, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Renders one panel grid per atlas under `out_root/<group label>/`.
pub fn render_atlas_sheet(
    atlases: &[ImportanceAtlas],
    plan: &SlicePlan,
    out_root: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for atlas in atlases {
        written.extend(render_atlas_report(
            atlas,
            plan,
            out_root.as_ref().join(atlas.key.label()),
        )?);
    }
    Ok(written)
}
