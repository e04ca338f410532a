//! The declarative run configuration: one JSON file (all fields optional,
//! unknown keys rejected) plus dotted `--set key=value` overrides and an
//! environment override for the output root.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use agemap_core::analysis::CorrectionMode;
use agemap_core::atlas::GapThresholds;
use agemap_core::baseline25d::Net2dConfig;
use agemap_core::gradcam::CamConfig;
use agemap_core::model::{NetConfig, TrainParams};
use agemap_core::phantom::PhantomParams;
use agemap_core::registration::RegConfig;

use crate::error::{CliError, CliResult};

/// Environment variable that overrides `output_root` (beaten only by an
/// explicit `--set output_root=...`).
pub const OUT_ROOT_ENV: &str = "AGEMAP_OUT_ROOT";

/// Cohort split sizes; each must be a positive multiple of six so every
/// sex x BMI cell is populated evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for CohortSizes {
    fn default() -> Self {
        CohortSizes {
            n_train: 240,
            n_val: 60,
            n_test: 120,
        }
    }
}

/// Everything a run needs, in one auditable document. Every field has a
/// default, so `{}` (or no config file at all) is a valid full-scale run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. The per-stage seeds (cohort jitter, weight init, epoch
    /// shuffle, baseline init) are derived from it at fixed offsets; `seed`
    /// keys inside nested sections are overwritten by that derivation.
    pub seed: u64,
    pub phantom: PhantomParams,
    pub cohort: CohortSizes,
    pub net: NetConfig,
    pub train: TrainParams,
    pub registration: RegConfig,
    /// Gap-band thresholds shared by the atlas grouping and the reports.
    pub thresholds: GapThresholds,
    pub correction: CorrectionMode,
    pub cam: CamConfig,
    pub baseline: Net2dConfig,
    pub output_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            phantom: PhantomParams::default(),
            cohort: CohortSizes::default(),
            net: NetConfig::default(),
            train: TrainParams::default(),
            registration: RegConfig::default(),
            thresholds: GapThresholds::default(),
            correction: CorrectionMode::default(),
            cam: CamConfig::default(),
            baseline: Net2dConfig::default(),
            output_root: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Threads the master seed into every seeded stage at fixed offsets.
    fn derive_seeds(&mut self) {
        self.phantom.seed = self.seed;
        self.net.seed = self.seed.wrapping_add(1);
        self.train.seed = self.seed.wrapping_add(2);
        self.baseline.seed = self.seed.wrapping_add(3);
    }

    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, e: agemap_core::Error| {
            CliError::Config(format!("config field `{name}`: {e}"))
        };
        self.phantom.validate().map_err(|e| field("phantom", e))?;
        self.net.validate().map_err(|e| field("net", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.registration
            .validate()
            .map_err(|e| field("registration", e))?;
        self.thresholds
            .validate()
            .map_err(|e| field("thresholds", e))?;
        self.baseline.validate().map_err(|e| field("baseline", e))?;
        for (name, n) in [
            ("cohort.n_train", self.cohort.n_train),
            ("cohort.n_val", self.cohort.n_val),
            ("cohort.n_test", self.cohort.n_test),
        ] {
            if n == 0 || n % 6 != 0 {
                return Err(CliError::Config(format!(
                    "config field `{name}`: must be a positive multiple of 6, got {n}"
                )));
            }
        }
        if self.net.input_dims != self.phantom.dims {
            return Err(CliError::Config(format!(
                "config field `net.input_dims`: {:?} does not match phantom.dims {:?}",
                self.net.input_dims, self.phantom.dims
            )));
        }
        let (nx, ny, nz) = self.phantom.dims;
        let proj = (nx.max(ny), ny.max(nz));
        if self.baseline.input_dims != proj {
            return Err(CliError::Config(format!(
                "config field `baseline.input_dims`: {:?} does not match the \
                 {proj:?} projection of phantom.dims {:?}",
                self.baseline.input_dims, self.phantom.dims
            )));
        }
        if self.output_root.as_os_str().is_empty() {
            return Err(CliError::Config(
                "config field `output_root`: must not be empty".into(),
            ));
        }
        Ok(())
    }
}

/// Sets a dotted path inside a JSON object tree, creating intermediate
/// objects as needed. Unknown leaf keys survive until deserialization, where
/// `deny_unknown_fields` rejects them with the field name.
fn insert_dotted(root: &mut Value, dotted: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "--set key `{dotted}` has an empty path segment"
        )));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "--set key `{dotted}`: `{}` is not a JSON object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("parts is non-empty");
}

/// Loads the run configuration: file (or pure defaults), then `--set`
/// overrides, then the output-root environment variable (lowest of the
/// three for that field). Any schema violation reports the offending field.
pub fn load(path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let mut value: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Config(format!("config {} is not valid JSON: {e}", p.display()))
            })?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    if !value.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }

    let mut root_overridden = false;
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got `{s}`"))
        })?;
        if key == "output_root" {
            root_overridden = true;
        }
        // Values that parse as JSON are taken as such; anything else is a
        // string (so --set output_root=/tmp/run needs no quoting).
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
        insert_dotted(&mut value, key, parsed)?;
    }
    if !root_overridden {
        if let Some(root) = env::var_os(OUT_ROOT_ENV) {
            value.as_object_mut().expect("checked").insert(
                "output_root".to_string(),
                Value::String(root.to_string_lossy().into_owned()),
            );
        }
    }

    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}
