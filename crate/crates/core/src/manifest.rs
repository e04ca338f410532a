//! Subject records and the JSON-lines cohort manifest.
//!
//! One line per subject; `image_path`, `cam_path`, and `field_path` are stored
//! relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Biological sex label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sex::F => write!(f, "F"),
            Sex::M => write!(f, "M"),
        }
    }
}

/// BMI group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BmiGroup {
    Healthy,
    Overweight,
    Obese,
}

impl BmiGroup {
    pub const ALL: [BmiGroup; 3] = [BmiGroup::Healthy, BmiGroup::Overweight, BmiGroup::Obese];
}

impl fmt::Display for BmiGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BmiGroup::Healthy => write!(f, "healthy"),
            BmiGroup::Overweight => write!(f, "overweight"),
            BmiGroup::Obese => write!(f, "obese"),
        }
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Valid chronological age range in years.
pub const AGE_MIN: u32 = 46;
pub const AGE_MAX: u32 = 81;

/// One cohort subject: identity, covariates, split, and artifact paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u64,
    pub age: u32,
    pub sex: Sex,
    pub bmi_group: BmiGroup,
    pub split: Split,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_path: Option<PathBuf>,
    /// Raw model prediction, in years.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_age: Option<f64>,
    /// Bias-corrected prediction, in years.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_age: Option<f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.age < AGE_MIN || self.age > AGE_MAX {
            return Err(Error::InvalidArgument(format!(
                "age {} outside [{AGE_MIN}, {AGE_MAX}] for subject {}",
                self.age, self.id
            )));
        }
        Ok(())
    }
}

/// An ordered collection of subject records plus the directory its relative
/// paths are anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SubjectRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<SubjectRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let manifest = Manifest {
            records,
            root: root.into(),
        };
        manifest.check_invariants()?;
        Ok(manifest)
    }

    fn check_invariants(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Manifest(format!("duplicate subject id {}", w[0])));
            }
        }
        for r in &self.records {
            r.validate()?;
        }
        Ok(())
    }

    /// Absolute path of a record-relative artifact path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Stable-order subset matching the predicate; the source is untouched.
    pub fn filter(&self, predicate: impl Fn(&SubjectRecord) -> bool) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| predicate(r))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the manifest as JSON lines. Record order is preserved.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)
                .map_err(|e| Error::Manifest(format!("serialize record {}: {e}", r.id)))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Reads a JSON-lines manifest; the manifest root is the file's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: SubjectRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
            records.push(r);
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Manifest::new(records, root)
    }
}
