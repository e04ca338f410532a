//! Per-subject 3D saliency volumes from the trained age model.
//!
//! The importance map for a prediction ŷ at the retained stage-3 activation
//! A (shape C×X×Y×Z) is built from G = ∂ŷ/∂A with a unit upstream gradient:
//! channel weights α_c are the spatial means of G_c, the raw map is
//! relu(Σ_c α_c · A_c), which is then trilinearly upsampled to the input
//! grid and — unless disabled — normalized by its maximum.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, SubjectRecord};
use crate::model::AgeNet;
use crate::volume::{read_vol, write_vol, Volume3};

/// Layer tag stamped into map provenance.
pub const CAM_LAYER: &str = "stage3";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    /// Divide each upsampled map by its maximum (when positive). Disabled,
    /// maps keep their raw scale; population averaging then mixes subject
    /// scales, so the default is on.
    pub normalize: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig { normalize: true }
    }
}

/// An importance volume aligned to the subject's image grid, with
/// provenance. Normalized maps lie in [0, 1] with max exactly 1 unless the
/// map is identically zero.
#[derive(Debug, Clone)]
pub struct CamMap {
    pub map: Volume3,
    pub subject_id: Option<u64>,
    pub checkpoint: Option<String>,
    pub layer: String,
}

/// Core map construction from a retained activation and its gradient:
/// α-weighted channel sum, relu, trilinear upsample to `out_dims`, optional
/// max-normalization. `acts` must be rank 4 ([C, X, Y, Z]).
pub fn cam_from_activation(
    acts: &Tensor,
    grads: &[f32],
    out_dims: (usize, usize, usize),
    normalize: bool,
) -> Result<Volume3> {
    if acts.shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "activation must be [C, X, Y, Z], got {:?}",
            acts.shape
        )));
    }
    if grads.len() != acts.data.len() {
        return Err(Error::LengthMismatch {
            expected: acts.data.len(),
            found: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let channels = acts.shape[0];
    let dims = (acts.shape[1], acts.shape[2], acts.shape[3]);
    let spatial = dims.0 * dims.1 * dims.2;

    // Channel weights: spatial mean of the gradient per channel.
    let mut alpha = vec![0.0f32; channels];
    for (c, a) in alpha.iter_mut().enumerate() {
        let sum: f64 = grads[c * spatial..(c + 1) * spatial]
            .iter()
            .map(|&v| v as f64)
            .sum();
        *a = (sum / spatial as f64) as f32;
    }

    // Weighted channel sum, rectified.
    let mut raw = vec![0.0f32; spatial];
    for c in 0..channels {
        let a = alpha[c];
        if a == 0.0 {
            continue;
        }
        let ch = &acts.data[c * spatial..(c + 1) * spatial];
        for (r, &v) in raw.iter_mut().zip(ch) {
            *r += a * v;
        }
    }
    for v in &mut raw {
        *v = v.max(0.0);
    }

    let coarse = Volume3::new(dims, (1.0, 1.0, 1.0), raw)?;
    let mut map = if dims == out_dims {
        coarse
    } else {
        coarse.resample(out_dims)?
    };

    if normalize {
        let (_, max) = map.min_max();
        if max > 0.0 {
            let inv = 1.0 / max;
            let data: Vec<f32> = map.data().iter().map(|&v| (v * inv).min(1.0)).collect();
            map.set_data(data)?;
        }
    }
    Ok(map)
}

/// Extracts the importance map for one image: forward pass, backward from
/// the raw prediction scalar, then [`cam_from_activation`] at the stage-3
/// activation.
pub fn extract_cam(net: &AgeNet, image: &Volume3, cfg: &CamConfig) -> Result<CamMap> {
    let mut fw = net.forward(image)?;
    fw.tape.backward(fw.pred_node, &[fw.stage3])?;
    let grads = fw
        .tape
        .grad(fw.stage3)
        .ok_or_else(|| Error::Numerical("no gradient at the saliency target".into()))?;
    let map = cam_from_activation(fw.tape.value(fw.stage3), grads, image.dims(), cfg.normalize)?;
    Ok(CamMap {
        map,
        subject_id: None,
        checkpoint: None,
        layer: CAM_LAYER.to_string(),
    })
}

/// Outcome of a batch extraction: per-subject failures do not abort the
/// batch; callers decide whether a nonzero failure count is fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortCamReport {
    pub written: usize,
    pub failures: Vec<(u64, String)>,
}

impl CohortCamReport {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Extracts one map per matching record into `out_dir` (created if needed)
/// as `cam_{id:05}.vol`, recording each file in the record's `cam_path`.
/// Deterministic: re-running on unchanged inputs rewrites identical bytes.
pub fn extract_cohort<F>(
    net: &AgeNet,
    manifest: &mut Manifest,
    filter: F,
    out_dir: &Path,
    cfg: &CamConfig,
) -> Result<CohortCamReport>
where
    F: Fn(&SubjectRecord) -> bool,
{
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = CohortCamReport {
        written: 0,
        failures: Vec::new(),
    };
    let targets: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| filter(r))
        .map(|(i, _)| i)
        .collect();
    for i in targets {
        let (id, image_path) = {
            let r = &manifest.records[i];
            (r.id, manifest.resolve(&r.image_path))
        };
        let result = (|| -> Result<PathBuf> {
            let image = read_vol(&image_path)?;
            let cam = extract_cam(net, &image, cfg)?;
            let file = out_dir.join(format!("cam_{id:05}.vol"));
            write_vol(&cam.map, &file)?;
            Ok(file)
        })();
        match result {
            Ok(file) => {
                let rel = file
                    .strip_prefix(&manifest.root)
                    .map(Path::to_path_buf)
                    .unwrap_or(file);
                manifest.records[i].cam_path = Some(rel);
                report.written += 1;
            }
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    Ok(report)
}
