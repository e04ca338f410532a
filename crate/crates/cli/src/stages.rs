//! The pipeline stages and their orchestration. Each stage validates its
//! upstream artifacts, recomputes its outputs idempotently, and writes a
//! `<root>/receipts/<stage>.json` receipt carrying digests of its inputs and
//! of the config sections it consumed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use agemap_core::analysis::{
    correct_records, fit_bias, localization_score, mask_mean, metrics, metrics_csv,
    render_metrics_table, scatter_export,
};
use agemap_core::atlas::{
    build_group, load_atlas, register_group, render_atlas_sheet, stratify, ImportanceAtlas,
    Scheme, SlicePlan,
};
use agemap_core::baseline25d::{predict25d, train25d};
use agemap_core::gradcam::extract_cohort;
use agemap_core::manifest::{Manifest, Split, SubjectRecord};
use agemap_core::model::{load_ckpt, predict_manifest, save_ckpt, train, AgeNet, TrainData};
use agemap_core::phantom::{generate_cohort, generate_subject, GroundTruth};
use agemap_core::{Error, Result};

use crate::config::RunConfig;
use crate::digest::{file_digest, files_digest, json_digest};
use crate::error::{CliError, CliResult};

/// Pipeline stages in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Train,
    Predict,
    Bias,
    Cam,
    Register,
    Atlas,
    Report,
    Baseline25d,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Bias => "bias",
            Stage::Cam => "cam",
            Stage::Register => "register",
            Stage::Atlas => "atlas",
            Stage::Report => "report",
            Stage::Baseline25d => "baseline25d",
        }
    }

    /// What `run-all` executes, in order.
    pub const PIPELINE: [Stage; 8] = [
        Stage::Phantom,
        Stage::Train,
        Stage::Predict,
        Stage::Bias,
        Stage::Cam,
        Stage::Register,
        Stage::Atlas,
        Stage::Report,
    ];
}

/// The fixed artifact layout under the output root.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }
    pub fn manifest(&self) -> PathBuf {
        self.cohort().join("manifest.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn ckpt(&self) -> PathBuf {
        self.checkpoints().join("agenet.ckpt")
    }
    pub fn history(&self) -> PathBuf {
        self.checkpoints().join("train_history.json")
    }
    pub fn bias(&self) -> PathBuf {
        self.checkpoints().join("bias.json")
    }
    pub fn cams(&self) -> PathBuf {
        self.root.join("cams")
    }
    pub fn transforms(&self) -> PathBuf {
        self.root.join("transforms")
    }
    pub fn transforms_marker(&self) -> PathBuf {
        self.transforms().join("basis.digest")
    }
    pub fn group_transforms(&self, scheme: Scheme, label: &str) -> PathBuf {
        self.transforms().join(scheme.label()).join(label)
    }
    pub fn atlases(&self) -> PathBuf {
        self.root.join("atlases")
    }
    pub fn group_atlas(&self, scheme: Scheme, label: &str) -> PathBuf {
        self.atlases().join(scheme.label()).join(label)
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn receipts(&self) -> PathBuf {
        self.root.join("receipts")
    }
    pub fn receipt(&self, stage: Stage) -> PathBuf {
        self.receipts().join(format!("{}.json", stage.name()))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

/// Stage receipt: proof of what ran against which inputs. The digests change
/// exactly when an input artifact or a config field the stage consumes does.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReceipt {
    pub stage: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_ms: u64,
}

struct Parts {
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Presence check for an upstream artifact, with the stage that produces it
/// named in the error.
fn require(path: &Path, what: &str, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!(
            "{what} not found at {}; run `agemap {produced_by}` first",
            path.display()
        )))
    }
}

fn image_files(manifest: &Manifest) -> Vec<PathBuf> {
    manifest
        .records
        .iter()
        .map(|r| manifest.resolve(&r.image_path))
        .collect()
}

/// Every regular file under `dir`, sorted by path for digest stability.
fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Runs one stage and writes its receipt on success.
pub fn run(cfg: &RunConfig, stage: Stage) -> CliResult<()> {
    let paths = Paths::new(&cfg.output_root);
    let start = Instant::now();
    let parts = match stage {
        Stage::Phantom => stage_phantom(cfg, &paths),
        Stage::Train => stage_train(cfg, &paths),
        Stage::Predict => stage_predict(cfg, &paths),
        Stage::Bias => stage_bias(cfg, &paths),
        Stage::Cam => stage_cam(cfg, &paths),
        Stage::Register => stage_register(cfg, &paths),
        Stage::Atlas => stage_atlas(cfg, &paths),
        Stage::Report => stage_report(cfg, &paths),
        Stage::Baseline25d => stage_baseline25d(cfg, &paths),
    }
    .map_err(|e| CliError::Stage {
        stage: stage.name(),
        source: e,
    })?;

    let receipt = StageReceipt {
        stage: stage.name().to_string(),
        config_digest: parts.config_digest,
        inputs: parts.inputs,
        outputs: parts.outputs,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    mkdirs(&paths.receipts()).map_err(CliError::Core)?;
    let text = serde_json::to_string_pretty(&receipt).expect("receipt serializes");
    write_text(&paths.receipt(stage), &(text + "\n")).map_err(CliError::Core)?;
    println!(
        "stage {}: done in {:.1}s",
        stage.name(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Runs the whole pipeline in order.
pub fn run_all(cfg: &RunConfig) -> CliResult<()> {
    for stage in Stage::PIPELINE {
        run(cfg, stage)?;
    }
    Ok(())
}

fn stage_phantom(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    generate_cohort(
        &cfg.phantom,
        cfg.cohort.n_train,
        cfg.cohort.n_val,
        cfg.cohort.n_test,
        paths.cohort(),
    )?;
    println!(
        "stage phantom: {} subjects under {}",
        cfg.cohort.n_train + cfg.cohort.n_val + cfg.cohort.n_test,
        paths.cohort().display()
    );
    Ok(Parts {
        config_digest: json_digest(&json!({ "phantom": cfg.phantom, "cohort": cfg.cohort })),
        inputs: BTreeMap::new(),
        outputs: vec![
            paths.rel(&paths.manifest()),
            "cohort/images".to_string(),
            "cohort/gt".to_string(),
        ],
    })
}

fn stage_train(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let manifest = Manifest::read(paths.manifest())?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    inputs.insert("images".to_string(), files_digest(&image_files(&manifest))?);

    let data = TrainData::from_manifest(&manifest)?;
    let mut net = AgeNet::init(cfg.net.clone(), data.train_mean_age())?;
    let history = train(&mut net, &data, &cfg.train)?;
    mkdirs(&paths.checkpoints())?;
    save_ckpt(&net, paths.ckpt())?;
    let text = serde_json::to_string_pretty(&history).expect("history serializes");
    write_text(&paths.history(), &(text + "\n"))?;
    if let Some(last) = history.epochs.last() {
        println!(
            "stage train: {} epochs, final val MAE {:.3}",
            history.epochs.len(),
            last.val_mae
        );
    }
    Ok(Parts {
        config_digest: json_digest(&json!({ "net": cfg.net, "train": cfg.train })),
        inputs,
        outputs: vec![paths.rel(&paths.ckpt()), paths.rel(&paths.history())],
    })
}

fn stage_predict(_cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    require(&paths.ckpt(), "model checkpoint", "train")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    inputs.insert("checkpoint".to_string(), file_digest(paths.ckpt())?);
    let net = load_ckpt(paths.ckpt())?;
    let mut manifest = Manifest::read(paths.manifest())?;
    inputs.insert("images".to_string(), files_digest(&image_files(&manifest))?);

    let n = predict_manifest(&net, &mut manifest, |r| r.split != Split::Train)?;
    manifest.write(paths.manifest())?;
    println!("stage predict: {n} raw predictions");
    Ok(Parts {
        config_digest: json_digest(&json!({})),
        inputs,
        outputs: vec![paths.rel(&paths.manifest())],
    })
}

fn stage_bias(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    let mut manifest = Manifest::read(paths.manifest())?;

    let model = fit_bias(&manifest.split(Split::Val).records)?;
    let mut corrected: Vec<SubjectRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .cloned()
        .collect();
    correct_records(&model, &mut corrected, cfg.correction)?;
    let by_id: BTreeMap<u64, f64> = corrected
        .iter()
        .map(|r| (r.id, r.corrected_age.expect("just corrected")))
        .collect();
    for r in manifest.records.iter_mut() {
        if let Some(&c) = by_id.get(&r.id) {
            r.corrected_age = Some(c);
        }
    }
    mkdirs(&paths.checkpoints())?;
    let text = serde_json::to_string_pretty(&model).expect("bias model serializes");
    write_text(&paths.bias(), &(text + "\n"))?;
    manifest.write(paths.manifest())?;
    println!(
        "stage bias: slope {:.4}, intercept {:.2} (fit on the validation split)",
        model.a, model.b
    );
    Ok(Parts {
        config_digest: json_digest(&json!({ "correction": cfg.correction })),
        inputs,
        outputs: vec![paths.rel(&paths.bias()), paths.rel(&paths.manifest())],
    })
}

fn stage_cam(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    require(&paths.ckpt(), "model checkpoint", "train")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    inputs.insert("checkpoint".to_string(), file_digest(paths.ckpt())?);
    let net = load_ckpt(paths.ckpt())?;
    let mut manifest = Manifest::read(paths.manifest())?;
    inputs.insert("images".to_string(), files_digest(&image_files(&manifest))?);

    let report = extract_cohort(
        &net,
        &mut manifest,
        |r| r.split == Split::Test,
        &paths.cams(),
        &cfg.cam,
    )?;
    if !report.failures.is_empty() {
        let (id, msg) = &report.failures[0];
        return Err(Error::Numerical(format!(
            "importance extraction failed for {} of {} subjects (first: subject {id}: {msg})",
            report.failures.len(),
            report.failures.len() + report.written,
        )));
    }
    // Keep the manifest relocatable: reference the maps relative to the
    // cohort directory rather than by absolute path.
    for r in manifest.records.iter_mut() {
        if r.cam_path.is_some() {
            r.cam_path = Some(PathBuf::from(format!("../cams/cam_{:05}.vol", r.id)));
        }
    }
    manifest.write(paths.manifest())?;
    println!("stage cam: {} importance volumes", report.written);
    Ok(Parts {
        config_digest: json_digest(&json!({ "cam": cfg.cam })),
        inputs,
        outputs: vec!["cams".to_string(), paths.rel(&paths.manifest())],
    })
}

/// Digest over everything the registration cache depends on: the images, the
/// registration config, and the record fields that decide group membership
/// and targets. Mutable manifest fields that registration ignores (raw
/// predictions, cam paths, field paths) stay out, so rewriting them does not
/// invalidate the cache.
fn registration_basis(cfg: &RunConfig, manifest: &Manifest, images_digest: &str) -> String {
    let rows: Vec<serde_json::Value> = manifest
        .records
        .iter()
        .map(|r| json!([r.id, r.age, r.sex, r.bmi_group, r.split, r.corrected_age]))
        .collect();
    json_digest(&json!({
        "records": rows,
        "images": images_digest,
        "registration": cfg.registration,
        "thresholds": cfg.thresholds,
    }))
}

/// Wipes the transform cache when its recorded basis no longer matches.
fn refresh_transforms(paths: &Paths, basis: &str) -> Result<()> {
    let marker = paths.transforms_marker();
    let current = fs::read_to_string(&marker).ok();
    if current.as_deref() != Some(basis) {
        if paths.transforms().exists() {
            fs::remove_dir_all(paths.transforms()).map_err(|e| Error::io(&paths.transforms(), e))?;
        }
        mkdirs(&paths.transforms())?;
        write_text(&marker, basis)?;
    }
    Ok(())
}

fn stage_register(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    let mut manifest = Manifest::read(paths.manifest())?;
    let images_digest = files_digest(&image_files(&manifest))?;
    inputs.insert("images".to_string(), images_digest.clone());

    let test = manifest.split(Split::Test);
    refresh_transforms(paths, &registration_basis(cfg, &manifest, &images_digest))?;

    let mut registered = 0usize;
    let mut field_paths: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for scheme in Scheme::ALL {
        let groups = stratify(&test, scheme, &cfg.thresholds)?;
        for (key, members) in &groups {
            let label = key.label();
            let out = paths.group_transforms(scheme, &label);
            let reg = register_group(&test, members, *key, &cfg.registration, &out)?;
            for f in &reg.failures {
                eprintln!(
                    "warning: registration of subject {} to the {label} target failed: {}",
                    f.id, f.reason
                );
            }
            registered += reg.registered.len();
            if scheme == Scheme::SexBmi {
                for &id in &reg.registered {
                    field_paths.insert(
                        id,
                        PathBuf::from(format!(
                            "../transforms/{}/{label}/subj_{id:05}.dfield",
                            scheme.label()
                        )),
                    );
                }
            }
        }
    }
    // Record each test subject's displacement field from its sex x BMI
    // group registration (targets stay at identity and keep no field).
    for r in manifest.records.iter_mut() {
        if let Some(p) = field_paths.get(&r.id) {
            r.field_path = Some(p.clone());
        }
    }
    manifest.write(paths.manifest())?;
    println!("stage register: {registered} member registrations (cached for reuse)");
    Ok(Parts {
        config_digest: json_digest(&json!({
            "registration": cfg.registration,
            "thresholds": cfg.thresholds,
        })),
        inputs,
        outputs: vec!["transforms".to_string(), paths.rel(&paths.manifest())],
    })
}

fn stage_atlas(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    let manifest = Manifest::read(paths.manifest())?;
    let images_digest = files_digest(&image_files(&manifest))?;
    inputs.insert("images".to_string(), images_digest.clone());

    let test = manifest.split(Split::Test);
    refresh_transforms(paths, &registration_basis(cfg, &manifest, &images_digest))?;
    // Atlases are derived wholesale from the current inputs; drop any stale
    // bundles from earlier configurations before rebuilding.
    if paths.atlases().exists() {
        fs::remove_dir_all(paths.atlases()).map_err(|e| Error::io(&paths.atlases(), e))?;
    }

    let mut outputs = Vec::new();
    let mut built = 0usize;
    for scheme in Scheme::ALL {
        let groups = stratify(&test, scheme, &cfg.thresholds)?;
        for (key, members) in &groups {
            let label = key.label();
            let bundle = paths.group_atlas(scheme, &label);
            let b = build_group(
                &test,
                members,
                *key,
                &cfg.registration,
                paths.group_transforms(scheme, &label),
                &bundle,
            )?;
            built += 1;
            outputs.push(paths.rel(&bundle));
            if !b.record.failures.is_empty() {
                eprintln!(
                    "warning: atlas {label} built from {} of {} members",
                    b.record.contributors.len(),
                    members.len()
                );
            }
        }
    }
    // The cam volumes fed the bundles; digest the ones the manifest names.
    let cam_files: Vec<PathBuf> = test
        .records
        .iter()
        .filter_map(|r| r.cam_path.as_ref().map(|p| test.resolve(p)))
        .collect();
    inputs.insert("cams".to_string(), files_digest(&cam_files)?);
    println!("stage atlas: {built} group atlases");
    Ok(Parts {
        config_digest: json_digest(&json!({
            "registration": cfg.registration,
            "thresholds": cfg.thresholds,
        })),
        inputs,
        outputs,
    })
}

/// Regenerates the ground truth of an atlas target in its own jittered
/// geometry (deterministic in the cohort parameters and subject id).
fn target_ground_truth(cfg: &RunConfig, manifest: &Manifest, target_id: u64) -> Result<GroundTruth> {
    let target = manifest
        .records
        .iter()
        .find(|r| r.id == target_id)
        .ok_or_else(|| {
            Error::Manifest(format!("atlas target {target_id} is not in the manifest"))
        })?;
    let (_, gt) = generate_subject(&cfg.phantom, target.id, target.age, target.sex, target.bmi_group)?;
    Ok(gt)
}

fn stage_report(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    let manifest = Manifest::read(paths.manifest())?;
    let test = manifest.split(Split::Test);
    let train_split = manifest.split(Split::Train);
    mkdirs(&paths.reports())?;

    // MAE table against the mean-prediction baseline.
    let table = metrics(&test.records, &train_split.records)?;
    write_text(&paths.reports().join("metrics.csv"), &metrics_csv(&table))?;
    write_text(
        &paths.reports().join("metrics.txt"),
        &render_metrics_table(&table),
    )?;

    // Per-subject predictions and gap bands.
    scatter_export(
        &test.records,
        &cfg.thresholds,
        paths.reports().join("scatter.csv"),
    )?;

    // Localization of the sex x BMI mean importance maps on the planted
    // aging anatomy, scored in each target's own geometry.
    let mut loc = String::from(
        "group,target_id,contributors,score,aging_voxels,body_voxels,aging_fraction\n",
    );
    let mut atlases_by_scheme: Vec<(Scheme, Vec<ImportanceAtlas>)> = Vec::new();
    for scheme in Scheme::ALL {
        let groups = stratify(&test, scheme, &cfg.thresholds)?;
        let mut atlases = Vec::new();
        for key in groups.keys() {
            let bundle = paths.group_atlas(scheme, &key.label());
            require(&bundle.join("group.json"), "atlas bundle", "atlas")?;
            let (atlas, _) = load_atlas(&bundle)?;
            atlases.push(atlas);
        }
        atlases_by_scheme.push((scheme, atlases));
    }
    for (scheme, atlases) in &atlases_by_scheme {
        if *scheme != Scheme::SexBmi {
            continue;
        }
        for atlas in atlases {
            let gt = target_ground_truth(cfg, &test, atlas.target_id)?;
            let score = localization_score(&atlas.mean_cam, &gt)?;
            let aging = gt.aging_mask.data().iter().filter(|&&v| v > 0.5).count();
            let body = gt.body_mask.data().iter().filter(|&&v| v > 0.5).count();
            let _ = writeln!(
                loc,
                "{},{},{},{:.4},{},{},{:.4}",
                atlas.key.label(),
                atlas.target_id,
                atlas.n_contributors,
                score,
                aging,
                body,
                aging as f64 / body as f64,
            );
        }
    }
    write_text(&paths.reports().join("localization.csv"), &loc)?;

    // Spine importance across the age-band atlases.
    let mut trend = String::from("band,target_id,contributors,spine_mean\n");
    for (scheme, atlases) in &atlases_by_scheme {
        if *scheme != Scheme::AgeBand {
            continue;
        }
        for atlas in atlases {
            let gt = target_ground_truth(cfg, &test, atlas.target_id)?;
            let spine = mask_mean(&atlas.mean_cam, &gt.spine_mask)?;
            let _ = writeln!(
                trend,
                "{},{},{},{:.6}",
                atlas.key.label(),
                atlas.target_id,
                atlas.n_contributors,
                spine,
            );
        }
    }
    write_text(&paths.reports().join("age_trend.csv"), &trend)?;

    // Overlay panel sheets for every atlas family.
    for (scheme, atlases) in &atlases_by_scheme {
        if atlases.is_empty() {
            continue;
        }
        let plan = SlicePlan::default_for(atlases[0].mean_image.dims());
        render_atlas_sheet(
            atlases,
            &plan,
            paths.reports().join("panels").join(scheme.label()),
        )?;
    }

    inputs.insert(
        "atlases".to_string(),
        files_digest(&walk_files(&paths.atlases())?)?,
    );
    println!(
        "stage report: metrics, scatter, localization, age trend, panels under {}",
        paths.reports().display()
    );
    Ok(Parts {
        config_digest: json_digest(&json!({
            "thresholds": cfg.thresholds,
            "phantom": cfg.phantom,
        })),
        inputs,
        outputs: vec![
            "reports/metrics.csv".to_string(),
            "reports/metrics.txt".to_string(),
            "reports/scatter.csv".to_string(),
            "reports/localization.csv".to_string(),
            "reports/age_trend.csv".to_string(),
            "reports/panels".to_string(),
        ],
    })
}

fn stage_baseline25d(cfg: &RunConfig, paths: &Paths) -> Result<Parts> {
    require(&paths.manifest(), "cohort manifest", "phantom")?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), file_digest(paths.manifest())?);
    let manifest = Manifest::read(paths.manifest())?;
    inputs.insert("images".to_string(), files_digest(&image_files(&manifest))?);

    let (net, history) = train25d(&manifest, cfg.baseline.clone(), &cfg.train)?;
    let preds: BTreeMap<u64, f64> = predict25d(&net, &manifest, |r| r.split != Split::Train)?
        .into_iter()
        .collect();
    let mut records: Vec<SubjectRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .cloned()
        .collect();
    for r in &mut records {
        r.predicted_age = preds.get(&r.id).copied();
        r.corrected_age = None;
    }
    let val: Vec<SubjectRecord> = records
        .iter()
        .filter(|r| r.split == Split::Val)
        .cloned()
        .collect();
    let model = fit_bias(&val)?;
    correct_records(&model, &mut records, cfg.correction)?;
    let test: Vec<SubjectRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .cloned()
        .collect();
    let table = metrics(&test, &manifest.split(Split::Train).records)?;

    mkdirs(&paths.reports())?;
    write_text(
        &paths.reports().join("metrics_25d.csv"),
        &metrics_csv(&table),
    )?;
    write_text(
        &paths.reports().join("metrics_25d.txt"),
        &render_metrics_table(&table),
    )?;
    let mut pred_csv = String::from("id,age,raw,corrected\n");
    for r in &records {
        let _ = writeln!(
            pred_csv,
            "{},{},{},{}",
            r.id,
            r.age,
            r.predicted_age.expect("predicted above"),
            r.corrected_age.expect("corrected above"),
        );
    }
    write_text(&paths.reports().join("predictions_25d.csv"), &pred_csv)?;
    if let (Some(last), Some(mae)) = (history.epochs.last(), table.overall_model_mae) {
        println!(
            "stage baseline25d: final val MAE {:.3}, corrected test MAE {:.3}",
            last.val_mae, mae
        );
    }
    Ok(Parts {
        config_digest: json_digest(&json!({
            "baseline": cfg.baseline,
            "train": cfg.train,
            "correction": cfg.correction,
        })),
        inputs,
        outputs: vec![
            "reports/metrics_25d.csv".to_string(),
            "reports/metrics_25d.txt".to_string(),
            "reports/predictions_25d.csv".to_string(),
        ],
    })
}
