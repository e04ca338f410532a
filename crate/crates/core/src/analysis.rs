//! Prediction analysis: linear bias correction of raw age predictions, MAE
//! metric tables against a mean-prediction baseline, prediction-gap
//! classification with scatter exports, and the mask-based localization score
//! for importance maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{GapBand, GapThresholds};
use crate::error::{Error, Result};
use crate::manifest::{BmiGroup, Sex, SubjectRecord};
use crate::phantom::GroundTruth;
use crate::volume::Volume3;

/// Closed-form ordinary least squares of `y` on `x`: returns
/// `(slope, intercept)`. Errors when the regressor has zero variance.
pub fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "ols inputs of length {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("ols needs at least one point".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0f64;
    let mut sxy = 0.0f64;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        sxx += dx * dx;
        sxy += dx * (yi - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Degenerate(
            "zero variance in the regressor; the fit is undetermined".into(),
        ));
    }
    let a = sxy / sxx;
    Ok((a, my - a * mx))
}

/// Linear age bias: raw prediction ≈ a·age + b, fitted on the validation
/// split. Correction inverts (or subtracts) this trend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub a: f64,
    pub b: f64,
}

impl BiasModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) || self.a.abs() <= 1e-6 {
            return Err(Error::Degenerate(format!(
                "bias slope {} is unusable; the corrected prediction would blow up",
                self.a
            )));
        }
        Ok(())
    }

    /// Inverse-regression correction: corrected = (raw − b)/a. Needs no
    /// chronological age at application time.
    pub fn correct(&self, raw: f64) -> f64 {
        (raw - self.b) / self.a
    }

    /// Residual-subtraction correction: corrected = raw − (a·age + b) + age.
    pub fn correct_residual(&self, raw: f64, age: f64) -> f64 {
        raw - (self.a * age + self.b) + age
    }
}

/// Which correction formula [`correct_records`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    #[default]
    Inverse,
    SubtractResidual,
}

/// Fits the bias model by OLS of raw prediction against chronological age.
/// Callers pass the validation split; fitting on test data would leak.
pub fn fit_bias(records: &[SubjectRecord]) -> Result<BiasModel> {
    if records.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "bias fit needs at least 3 records, got {}",
            records.len()
        )));
    }
    let mut ages = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    for r in records {
        let raw = r.predicted_age.ok_or_else(|| {
            Error::MissingArtifact(format!(
                "subject {} has no raw prediction; run the predict stage first",
                r.id
            ))
        })?;
        ages.push(r.age as f64);
        preds.push(raw);
    }
    let (a, b) = ols(&ages, &preds)?;
    let model = BiasModel { a, b };
    model.validate()?;
    Ok(model)
}

/// Fills `corrected_age` from `predicted_age` for every record.
pub fn correct_records(
    model: &BiasModel,
    records: &mut [SubjectRecord],
    mode: CorrectionMode,
) -> Result<()> {
    model.validate()?;
    for r in records.iter_mut() {
        let raw = r.predicted_age.ok_or_else(|| {
            Error::MissingArtifact(format!(
                "subject {} has no raw prediction; run the predict stage first",
                r.id
            ))
        })?;
        r.corrected_age = Some(match mode {
            CorrectionMode::Inverse => model.correct(raw),
            CorrectionMode::SubtractResidual => model.correct_residual(raw, r.age as f64),
        });
    }
    Ok(())
}

/// One sex x BMI cell of the metrics table. `None` MAE means an empty cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub bmi_group: BmiGroup,
    pub sex: Sex,
    pub n: usize,
    pub model_mae: Option<f64>,
    pub baseline_mae: Option<f64>,
}

/// Per-cell and overall MAE of the model and of the mean-prediction baseline
/// (which always predicts the training-split mean age of the subject's cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Six cells in fixed row order: healthy F/M, overweight F/M, obese F/M.
    pub rows: Vec<MetricsRow>,
    pub overall_n: usize,
    pub overall_model_mae: Option<f64>,
    pub overall_baseline_mae: Option<f64>,
}

/// Fixed cell order of the metrics table.
fn cells() -> [(BmiGroup, Sex); 6] {
    [
        (BmiGroup::Healthy, Sex::F),
        (BmiGroup::Healthy, Sex::M),
        (BmiGroup::Overweight, Sex::F),
        (BmiGroup::Overweight, Sex::M),
        (BmiGroup::Obese, Sex::F),
        (BmiGroup::Obese, Sex::M),
    ]
}

/// Computes per-cell and overall MAE over `test` records (which must carry
/// corrected predictions). The baseline predicts each cell's mean training
/// age; a test cell without training subjects is an error.
pub fn metrics(test: &[SubjectRecord], train: &[SubjectRecord]) -> Result<MetricsTable> {
    for r in test {
        if r.corrected_age.is_none() {
            return Err(Error::MissingArtifact(format!(
                "subject {} has no corrected prediction; run the bias stage first",
                r.id
            )));
        }
    }
    let train_mean = |bmi: BmiGroup, sex: Sex| -> Option<f64> {
        let ages: Vec<f64> = train
            .iter()
            .filter(|r| r.bmi_group == bmi && r.sex == sex)
            .map(|r| r.age as f64)
            .collect();
        (!ages.is_empty()).then(|| ages.iter().sum::<f64>() / ages.len() as f64)
    };

    let mut rows = Vec::with_capacity(6);
    let mut model_abs = 0.0f64;
    let mut baseline_abs = 0.0f64;
    let mut total = 0usize;
    for (bmi, sex) in cells() {
        let members: Vec<&SubjectRecord> = test
            .iter()
            .filter(|r| r.bmi_group == bmi && r.sex == sex)
            .collect();
        if members.is_empty() {
            rows.push(MetricsRow {
                bmi_group: bmi,
                sex,
                n: 0,
                model_mae: None,
                baseline_mae: None,
            });
            continue;
        }
        let mean_age = train_mean(bmi, sex).ok_or_else(|| {
            Error::Degenerate(format!(
                "no training subjects in cell {bmi}/{sex}; the mean-prediction baseline is undefined"
            ))
        })?;
        let mut cell_model = 0.0f64;
        let mut cell_baseline = 0.0f64;
        for m in &members {
            let age = m.age as f64;
            cell_model += (m.corrected_age.expect("checked") - age).abs();
            cell_baseline += (mean_age - age).abs();
        }
        model_abs += cell_model;
        baseline_abs += cell_baseline;
        total += members.len();
        let n = members.len() as f64;
        rows.push(MetricsRow {
            bmi_group: bmi,
            sex,
            n: members.len(),
            model_mae: Some(cell_model / n),
            baseline_mae: Some(cell_baseline / n),
        });
    }
    Ok(MetricsTable {
        rows,
        overall_n: total,
        overall_model_mae: (total > 0).then(|| model_abs / total as f64),
        overall_baseline_mae: (total > 0).then(|| baseline_abs / total as f64),
    })
}

fn mae_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |m| format!("{m:.3}"))
}

/// Renders the metrics as an aligned text table, one row per sex x BMI cell
/// plus the overall row, baseline column before the model column.
pub fn render_metrics_table(table: &MetricsTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<4} {:>6} {:>10} {:>8}",
        "category", "sex", "n", "mean_pred", "model"
    );
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{:<12} {:<4} {:>6} {:>10} {:>8}",
            row.bmi_group.to_string(),
            row.sex.to_string(),
            row.n,
            mae_cell(row.baseline_mae),
            mae_cell(row.model_mae),
        );
    }
    let _ = writeln!(
        out,
        "{:<12} {:<4} {:>6} {:>10} {:>8}",
        "overall",
        "M+F",
        table.overall_n,
        mae_cell(table.overall_baseline_mae),
        mae_cell(table.overall_model_mae),
    );
    out
}

/// Renders the metrics as CSV with the same rows and column order as the
/// text table; empty cells stay empty.
pub fn metrics_csv(table: &MetricsTable) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |m| format!("{m:.3}"));
    let mut out = String::from("category,sex,n,mean_pred_mae,model_mae\n");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.bmi_group,
            row.sex,
            row.n,
            cell(row.baseline_mae),
            cell(row.model_mae),
        );
    }
    let _ = writeln!(
        out,
        "overall,M+F,{},{},{}",
        table.overall_n,
        cell(table.overall_baseline_mae),
        cell(table.overall_model_mae),
    );
    out
}

/// One subject's prediction gap: Δ = corrected − age, plus the gap band it
/// falls into (`None` between the aligned and extreme thresholds).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub id: u64,
    pub age: u32,
    pub raw: f64,
    pub corrected: f64,
    pub delta: f64,
    pub band: Option<GapBand>,
    pub sex: Sex,
    pub bmi_group: BmiGroup,
}

/// Per-subject prediction gaps and bands, sharing the atlas thresholds.
pub fn gap_table(records: &[SubjectRecord], thresholds: &GapThresholds) -> Result<Vec<GapRow>> {
    thresholds.validate()?;
    records
        .iter()
        .map(|r| {
            let raw = r.predicted_age.ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "subject {} has no raw prediction; run the predict stage first",
                    r.id
                ))
            })?;
            let corrected = r.corrected_age.ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "subject {} has no corrected prediction; run the bias stage first",
                    r.id
                ))
            })?;
            let delta = corrected - r.age as f64;
            Ok(GapRow {
                id: r.id,
                age: r.age,
                raw,
                corrected,
                delta,
                band: GapBand::of(delta, thresholds),
                sex: r.sex,
                bmi_group: r.bmi_group,
            })
        })
        .collect()
}

fn band_name(band: Option<GapBand>) -> &'static str {
    match band {
        Some(GapBand::Aligned) => "aligned",
        Some(GapBand::Accelerated) => "accelerated",
        Some(GapBand::Decelerated) => "decelerated",
        None => "unassigned",
    }
}

/// CSV of per-subject predictions for scatter plots, one row per record.
pub fn scatter_csv(rows: &[GapRow]) -> String {
    let mut out = String::from("id,age,raw,corrected,delta,band,sex,bmi_group\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.id,
            r.age,
            r.raw,
            r.corrected,
            r.delta,
            band_name(r.band),
            r.sex,
            r.bmi_group,
        );
    }
    out
}

/// Writes the scatter CSV for `records` to `path`.
pub fn scatter_export(
    records: &[SubjectRecord],
    thresholds: &GapThresholds,
    path: impl AsRef<Path>,
) -> Result<()> {
    let rows = gap_table(records, thresholds)?;
    let path = path.as_ref();
    fs::write(path, scatter_csv(&rows)).map_err(|e| Error::io(path, e))
}

/// Mean of `map` inside `mask` (voxels with mask value > 0.5).
pub fn mask_mean(map: &Volume3, mask: &Volume3) -> Result<f64> {
    if map.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "map dims {:?} != mask dims {:?}",
            map.dims(),
            mask.dims()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (&v, &m) in map.data().iter().zip(mask.data()) {
        if m > 0.5 {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// How concentrated an importance map (or atlas) is on the planted aging
/// anatomy: mean inside the aging mask over mean inside the rest of the body,
/// with a 1e-9 denominator floor. A positive numerator over an exactly zero
/// denominator reports +∞.
pub fn localization_score(map: &Volume3, gt: &GroundTruth) -> Result<f64> {
    let dims = map.dims();
    if gt.aging_mask.dims() != dims || gt.body_mask.dims() != dims {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?}/{:?} do not match map dims {dims:?}",
            gt.aging_mask.dims(),
            gt.body_mask.dims()
        )));
    }
    let mut num_sum = 0.0f64;
    let mut num_n = 0usize;
    let mut den_sum = 0.0f64;
    let mut den_n = 0usize;
    for (i, &v) in map.data().iter().enumerate() {
        let aging = gt.aging_mask.data()[i] > 0.5;
        let body = gt.body_mask.data()[i] > 0.5;
        if aging {
            num_sum += v as f64;
            num_n += 1;
        } else if body {
            den_sum += v as f64;
            den_n += 1;
        }
    }
    if num_n == 0 || den_n == 0 {
        return Err(Error::Degenerate(
            "localization score needs non-empty aging and body-minus-aging masks".into(),
        ));
    }
    let num = num_sum / num_n as f64;
    let den = den_sum / den_n as f64;
    if den <= 0.0 && num > 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(num / den.max(1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Split;
    use std::path::PathBuf;

    fn record(id: u64, age: u32, sex: Sex, bmi: BmiGroup, split: Split) -> SubjectRecord {
        SubjectRecord {
            id,
            age,
            sex,
            bmi_group: bmi,
            split,
            image_path: PathBuf::from(format!("images/subj_{id:05}.vol")),
            cam_path: None,
            field_path: None,
            predicted_age: None,
            corrected_age: None,
        }
    }

    fn with_pred(mut r: SubjectRecord, raw: f64) -> SubjectRecord {
        r.predicted_age = Some(raw);
        r
    }

    #[test]
    fn perfect_predictions_fit_the_identity_bias() {
        let records: Vec<SubjectRecord> = [50u32, 58, 66, 74]
            .iter()
            .enumerate()
            .map(|(i, &age)| {
                with_pred(
                    record(i as u64, age, Sex::F, BmiGroup::Healthy, Split::Val),
                    age as f64,
                )
            })
            .collect();
        let model = fit_bias(&records).unwrap();
        assert!((model.a - 1.0).abs() < 1e-12, "a = {}", model.a);
        assert!(model.b.abs() < 1e-9, "b = {}", model.b);
        assert!((model.correct(55.0) - 55.0).abs() < 1e-9);
    }

    #[test]
    fn constructed_line_recovers_slope_and_intercept() {
        // raw = 0.5·age + 30 exactly.
        let records: Vec<SubjectRecord> = [50u32, 60, 70, 80]
            .iter()
            .enumerate()
            .map(|(i, &age)| {
                with_pred(
                    record(i as u64, age, Sex::M, BmiGroup::Obese, Split::Val),
                    0.5 * age as f64 + 30.0,
                )
            })
            .collect();
        let model = fit_bias(&records).unwrap();
        assert!((model.a - 0.5).abs() < 1e-12);
        assert!((model.b - 30.0).abs() < 1e-9);
        // Inverting the fitted line: raw 55 corrects to 50.
        assert!((model.correct(55.0) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        // All ages equal: zero regressor variance.
        let same: Vec<SubjectRecord> = (0..4)
            .map(|i| {
                with_pred(
                    record(i, 60, Sex::F, BmiGroup::Healthy, Split::Val),
                    58.0 + i as f64,
                )
            })
            .collect();
        assert!(matches!(fit_bias(&same), Err(Error::Degenerate(_))));

        // Fewer than 3 records.
        let two: Vec<SubjectRecord> = (0..2)
            .map(|i| {
                with_pred(
                    record(i, 50 + 10 * i as u32, Sex::F, BmiGroup::Healthy, Split::Val),
                    50.0,
                )
            })
            .collect();
        assert!(matches!(fit_bias(&two), Err(Error::InvalidArgument(_))));

        // A raw prediction is missing.
        let mut records: Vec<SubjectRecord> = (0..3)
            .map(|i| {
                with_pred(
                    record(i, 50 + 10 * i as u32, Sex::F, BmiGroup::Healthy, Split::Val),
                    55.0 + i as f64,
                )
            })
            .collect();
        records[1].predicted_age = None;
        assert!(matches!(fit_bias(&records), Err(Error::MissingArtifact(_))));

        // A constant predictor fits slope 0, which is unusable for inversion.
        let flat: Vec<SubjectRecord> = (0..4)
            .map(|i| {
                with_pred(
                    record(i, 50 + 8 * i as u32, Sex::F, BmiGroup::Healthy, Split::Val),
                    61.25,
                )
            })
            .collect();
        assert!(matches!(fit_bias(&flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn correcting_the_fitting_split_flattens_the_residual_slope() {
        // A biased predictor with a deterministic wiggle around the trend.
        let mut records: Vec<SubjectRecord> = (0..24)
            .map(|i| {
                let age = 46 + (i * 35) / 23;
                let raw = 0.6 * age as f64 + 20.0 + 1.5 * (i as f64).sin();
                with_pred(
                    record(i as u64, age as u32, Sex::F, BmiGroup::Healthy, Split::Val),
                    raw,
                )
            })
            .collect();
        let model = fit_bias(&records).unwrap();

        for mode in [CorrectionMode::Inverse, CorrectionMode::SubtractResidual] {
            correct_records(&model, &mut records, mode).unwrap();
            let ages: Vec<f64> = records.iter().map(|r| r.age as f64).collect();
            let residuals: Vec<f64> = records
                .iter()
                .map(|r| r.corrected_age.unwrap() - r.age as f64)
                .collect();
            let (slope, _) = ols(&ages, &residuals).unwrap();
            assert!(slope.abs() < 1e-6, "{mode:?} residual slope = {slope}");
        }
    }

    #[test]
    fn metrics_reproduce_hand_computed_maes() {
        // Two test subjects in one cell with absolute errors 1 and 2.
        let mut t1 = record(0, 55, Sex::F, BmiGroup::Healthy, Split::Test);
        t1.corrected_age = Some(56.0);
        let mut t2 = record(1, 65, Sex::F, BmiGroup::Healthy, Split::Test);
        t2.corrected_age = Some(63.0);
        // Training ages 50 and 70: the cell baseline always predicts 60.
        let train = vec![
            record(10, 50, Sex::F, BmiGroup::Healthy, Split::Train),
            record(11, 70, Sex::F, BmiGroup::Healthy, Split::Train),
        ];
        let table = metrics(&[t1, t2], &train).unwrap();

        assert_eq!(table.rows.len(), 6);
        let row = &table.rows[0];
        assert_eq!((row.bmi_group, row.sex), (BmiGroup::Healthy, Sex::F));
        assert_eq!(row.n, 2);
        assert!((row.model_mae.unwrap() - 1.5).abs() < 1e-12);
        // Baseline errors: |60-55| = 5 and |60-65| = 5.
        assert!((row.baseline_mae.unwrap() - 5.0).abs() < 1e-12);
        // A single populated cell is the overall value.
        assert!((table.overall_model_mae.unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(table.overall_n, 2);
        // Untouched cells render with zero counts and blank MAE.
        assert!(table.rows[1..]
            .iter()
            .all(|r| r.n == 0 && r.model_mae.is_none() && r.baseline_mae.is_none()));
    }

    #[test]
    fn overall_is_the_weighted_combination_of_cells() {
        let mut test = Vec::new();
        let mut train = Vec::new();
        let mut id = 0u64;
        let cells: [(BmiGroup, Sex, usize); 3] = [
            (BmiGroup::Healthy, Sex::F, 1),
            (BmiGroup::Overweight, Sex::M, 2),
            (BmiGroup::Obese, Sex::F, 3),
        ];
        for (bmi, sex, n) in cells {
            for k in 0..n {
                let age = 50 + 3 * k as u32;
                let mut r = record(id, age, sex, bmi, Split::Test);
                r.corrected_age = Some(age as f64 + 0.7 * (id as f64 + 1.0));
                test.push(r);
                id += 1;
                train.push(record(1000 + id, 55 + k as u32, sex, bmi, Split::Train));
                id += 1;
            }
        }
        let table = metrics(&test, &train).unwrap();
        let mut weighted = 0.0;
        for row in &table.rows {
            if let Some(mae) = row.model_mae {
                weighted += row.n as f64 * mae;
            }
        }
        let overall = table.overall_model_mae.unwrap();
        assert!((overall - weighted / table.overall_n as f64).abs() < 1e-9);

        // Record order cannot matter.
        let mut shuffled = test.clone();
        shuffled.reverse();
        assert_eq!(metrics(&shuffled, &train).unwrap(), table);

        // Corrected predictions are a precondition.
        let mut missing = test.clone();
        missing[0].corrected_age = None;
        assert!(matches!(
            metrics(&missing, &train),
            Err(Error::MissingArtifact(_))
        ));

        // A populated test cell without training subjects has no baseline.
        let empty_train: Vec<SubjectRecord> = Vec::new();
        assert!(matches!(
            metrics(&test, &empty_train),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn published_fixture_renders_row_structure_and_numbers_exactly() {
        let fixture = [
            (BmiGroup::Healthy, Sex::F, 7.190, 2.460),
            (BmiGroup::Healthy, Sex::M, 7.672, 2.425),
            (BmiGroup::Overweight, Sex::F, 7.485, 2.525),
            (BmiGroup::Overweight, Sex::M, 8.036, 2.623),
            (BmiGroup::Obese, Sex::F, 7.045, 2.651),
            (BmiGroup::Obese, Sex::M, 7.550, 2.720),
        ];
        let table = MetricsTable {
            rows: fixture
                .iter()
                .map(|&(bmi_group, sex, baseline, model)| MetricsRow {
                    bmi_group,
                    sex,
                    n: 200,
                    model_mae: Some(model),
                    baseline_mae: Some(baseline),
                })
                .collect(),
            overall_n: 1200,
            overall_model_mae: Some(2.565),
            overall_baseline_mae: Some(7.499),
        };
        let text = render_metrics_table(&table);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8); // header + six cells + overall

        for (line, &(bmi, sex, baseline, model)) in lines[1..7].iter().zip(&fixture) {
            assert!(line.starts_with(&bmi.to_string()));
            assert!(line.contains(&format!(" {sex} ")));
            let b = format!("{baseline:.3}");
            let m = format!("{model:.3}");
            assert!(line.contains(&b), "{line} missing {b}");
            assert!(line.contains(&m), "{line} missing {m}");
            // Baseline column sits left of the model column.
            assert!(line.find(&b).unwrap() < line.find(&m).unwrap());
        }
        let overall = lines[7];
        assert!(overall.starts_with("overall"));
        assert!(overall.contains("M+F"));
        assert!(overall.contains("1200"));
        assert!(overall.contains("7.499"));
        assert!(overall.contains("2.565"));

        let csv = metrics_csv(&table);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with("category,sex,n,mean_pred_mae,model_mae\n"));
        assert!(csv.contains("healthy,F,200,7.190,2.460"));
        assert!(csv.contains("obese,M,200,7.550,2.720"));
        assert!(csv.ends_with("overall,M+F,1200,7.499,2.565\n"));
    }

    #[test]
    fn gap_rows_classify_deltas_and_export_csv() {
        let deltas = [0.0, 2.0, 4.5, -4.5];
        let records: Vec<SubjectRecord> = deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut r = record(i as u64, 60, Sex::F, BmiGroup::Healthy, Split::Test);
                r.predicted_age = Some(63.1);
                r.corrected_age = Some(60.0 + d);
                r
            })
            .collect();
        let rows = gap_table(&records, &GapThresholds::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].band, Some(GapBand::Aligned));
        assert_eq!(rows[1].band, None);
        assert_eq!(rows[2].band, Some(GapBand::Accelerated));
        assert_eq!(rows[3].band, Some(GapBand::Decelerated));
        assert!((rows[2].delta - 4.5).abs() < 1e-12);

        let csv = scatter_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "id,age,raw,corrected,delta,band,sex,bmi_group");
        assert_eq!(lines[3], "2,60,63.1,64.5,4.5,accelerated,F,healthy");
        assert_eq!(lines[2], "1,60,63.1,62,2,unassigned,F,healthy");

        let mut missing = records.clone();
        missing[0].corrected_age = None;
        assert!(matches!(
            gap_table(&missing, &GapThresholds::default()),
            Err(Error::MissingArtifact(_))
        ));
    }

    fn boxed_gt(dims: (usize, usize, usize)) -> (GroundTruth, Vec<bool>, Vec<bool>) {
        let (nx, ny, nz) = dims;
        let mut aging = vec![0.0f32; nx * ny * nz];
        let mut body = vec![0.0f32; nx * ny * nz];
        let mut in_aging = vec![false; nx * ny * nz];
        let mut in_body = vec![false; nx * ny * nz];
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let b = x >= 1 && x < nx - 1 && y >= 1 && y < ny - 1 && z >= 1 && z < nz - 1;
                    let a = b && x < 3 && y < 3 && z < 3;
                    if b {
                        body[i] = 1.0;
                        in_body[i] = true;
                    }
                    if a {
                        aging[i] = 1.0;
                        in_aging[i] = true;
                    }
                    i += 1;
                }
            }
        }
        let vol = |d: Vec<f32>| Volume3::new(dims, (1.0, 1.0, 1.0), d).unwrap();
        let zeros = Volume3::zeros(dims);
        (
            GroundTruth {
                aging_mask: vol(aging),
                body_mask: vol(body),
                spine_mask: zeros.clone(),
                heart_mask: zeros.clone(),
                muscle_mask: zeros,
            },
            in_aging,
            in_body,
        )
    }

    #[test]
    fn localization_score_matches_the_worked_examples() {
        let dims = (8, 8, 8);
        let (gt, in_aging, in_body) = boxed_gt(dims);

        // 0.9 on the aging anatomy, 0.3 elsewhere in the body: ratio 3.
        let data: Vec<f32> = in_aging
            .iter()
            .zip(&in_body)
            .map(|(&a, &b)| if a { 0.9 } else if b { 0.3 } else { 0.0 })
            .collect();
        let map = Volume3::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let score = localization_score(&map, &gt).unwrap();
        // Tolerance covers the f32 storage of the map values.
        assert!((score - 3.0).abs() < 1e-6, "score = {score}");

        // A uniform map over the whole body scores 1.
        let data: Vec<f32> = in_body.iter().map(|&b| if b { 0.7 } else { 0.0 }).collect();
        let uniform = Volume3::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        assert!((localization_score(&uniform, &gt).unwrap() - 1.0).abs() < 1e-9);

        // All mass inside the aging mask: the ratio saturates to +infinity.
        let data: Vec<f32> = in_aging.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let focused = Volume3::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        assert!(localization_score(&focused, &gt).unwrap().is_infinite());

        // An all-zero map scores 0, not NaN.
        assert_eq!(localization_score(&Volume3::zeros(dims), &gt).unwrap(), 0.0);
    }

    #[test]
    fn localization_score_is_scale_invariant_and_validates_masks() {
        let dims = (8, 8, 8);
        let (gt, in_aging, in_body) = boxed_gt(dims);
        let data: Vec<f32> = in_aging
            .iter()
            .zip(&in_body)
            .enumerate()
            .map(|(i, (&a, &b))| {
                if a {
                    0.5 + 0.01 * (i % 7) as f32
                } else if b {
                    0.1 + 0.005 * (i % 5) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let map = Volume3::new(dims, (1.0, 1.0, 1.0), data.clone()).unwrap();
        let scaled = Volume3::new(dims, (1.0, 1.0, 1.0), data.iter().map(|v| v * 7.3).collect())
            .unwrap();
        let s1 = localization_score(&map, &gt).unwrap();
        let s2 = localization_score(&scaled, &gt).unwrap();
        // Relative tolerance at the f32 rounding level of the scaled values.
        assert!((s1 - s2).abs() < 1e-6 * s1.abs(), "{s1} vs {s2}");

        // Empty masks and shape mismatches are rejected.
        let empty = GroundTruth {
            aging_mask: Volume3::zeros(dims),
            body_mask: gt.body_mask.clone(),
            spine_mask: Volume3::zeros(dims),
            heart_mask: Volume3::zeros(dims),
            muscle_mask: Volume3::zeros(dims),
        };
        assert!(matches!(
            localization_score(&map, &empty),
            Err(Error::Degenerate(_))
        ));
        let small = Volume3::zeros((4, 4, 4));
        assert!(matches!(
            localization_score(&small, &gt),
            Err(Error::ShapeMismatch(_))
        ));

        // Mask means back the age-trend checks; hand-verify one.
        let mean = mask_mean(&map, &gt.aging_mask).unwrap();
        let expect: f64 = in_aging
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| 0.5 + 0.01 * (i % 7) as f64)
            .sum::<f64>()
            / in_aging.iter().filter(|&&a| a).count() as f64;
        assert!((mean - expect).abs() < 1e-6);
        assert!(matches!(
            mask_mean(&map, &Volume3::zeros(dims)),
            Err(Error::Degenerate(_))
        ));
    }
}
