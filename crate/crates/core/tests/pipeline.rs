//! Library-level integration: the cohort, training, prediction, bias
//! correction, importance extraction, atlas aggregation, and metrics modules
//! glued together the way the command-line driver uses them.

use tempfile::tempdir;

use agemap_core::analysis::{correct_records, fit_bias, localization_score, metrics, CorrectionMode};
use agemap_core::atlas::{build_group, stratify, GapThresholds, Scheme};
use agemap_core::gradcam::{extract_cohort, CamConfig};
use agemap_core::manifest::{BmiGroup, Sex, Split};
use agemap_core::model::{predict_manifest, train, AgeNet, NetConfig, TrainData, TrainParams};
use agemap_core::phantom::{generate_cohort, generate_subject, PhantomParams};
use agemap_core::registration::RegConfig;

#[test]
fn cohort_to_atlas_flow_holds_together() {
    let dir = tempdir().unwrap();
    let params = PhantomParams::default();
    let mut manifest = generate_cohort(&params, 12, 12, 12, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 36);

    // A single epoch is enough to exercise the full training loop.
    let data = TrainData::from_manifest(&manifest).unwrap();
    let mut net = AgeNet::init(NetConfig::default(), data.train_mean_age()).unwrap();
    let tp = TrainParams {
        epochs: 1,
        ..TrainParams::default()
    };
    let history = train(&mut net, &data, &tp).unwrap();
    assert_eq!(history.epochs.len(), 1);
    assert!(history.epochs[0].val_mae.is_finite());

    // Raw predictions for everything the later stages consume.
    let n = predict_manifest(&net, &mut manifest, |r| r.split != Split::Train).unwrap();
    assert_eq!(n, 24);
    for r in manifest.records.iter().filter(|r| r.split != Split::Train) {
        let raw = r.predicted_age.expect("predicted");
        assert!(raw.is_finite() && (0.0..200.0).contains(&raw), "raw = {raw}");
    }

    // Bias correction fit on the validation split, applied to test records.
    let model = fit_bias(&manifest.split(Split::Val).records).unwrap();
    let mut test_records = manifest.split(Split::Test).records;
    correct_records(&model, &mut test_records, CorrectionMode::Inverse).unwrap();

    // Metrics table against the training-split mean-age baseline.
    let table = metrics(&test_records, &manifest.split(Split::Train).records).unwrap();
    assert_eq!(table.overall_n, 12);
    assert!(table.overall_model_mae.unwrap().is_finite());
    assert!(table.overall_baseline_mae.unwrap() > 0.0);

    // Importance volumes for one sex x BMI cell, then its atlas.
    let cam_dir = dir.path().join("cams");
    let picked = |r: &agemap_core::manifest::SubjectRecord| {
        r.split == Split::Test && r.sex == Sex::F && r.bmi_group == BmiGroup::Healthy
    };
    let report = extract_cohort(&net, &mut manifest, picked, &cam_dir, &CamConfig::default())
        .unwrap();
    assert_eq!(report.written, 2);
    assert!(report.failures.is_empty());

    let test = manifest.split(Split::Test);
    let groups = stratify(&test, Scheme::SexBmi, &GapThresholds::default()).unwrap();
    let (key, members) = groups
        .iter()
        .find(|(k, _)| k.cell == Some((Sex::F, BmiGroup::Healthy)))
        .expect("the cell is populated");
    let reg = RegConfig {
        levels: 2,
        affine_iters: 30,
        deform_iters: 30,
        ..RegConfig::default()
    };
    let built = build_group(
        &test,
        members,
        *key,
        &reg,
        dir.path().join("transforms"),
        dir.path().join("atlas"),
    )
    .unwrap();
    assert_eq!(built.atlas.n_contributors, 2);
    built.atlas.validate().unwrap();

    // The mean importance map scores against the target's own ground truth.
    let target = test
        .records
        .iter()
        .find(|r| r.id == built.record.target_id)
        .unwrap();
    let (_, gt) = generate_subject(&params, target.id, target.age, target.sex, target.bmi_group)
        .unwrap();
    let score = localization_score(&built.atlas.mean_cam, &gt).unwrap();
    assert!(score >= 0.0, "score = {score}");
}
