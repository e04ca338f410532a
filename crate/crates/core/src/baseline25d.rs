//! Projection baseline: collapse each volume to a two-channel 2D image
//! (coronal and sagittal mean-intensity projections), train a small 2D CNN
//! with the same optimizer contract as the 3D model, and extract 2D saliency
//! maps with the shared map formula.
//!
//! Projections are persistable as 2-channel `.vol` files using an `nz = 2`
//! convention: channel 0 (coronal) at z = 0, channel 1 (sagittal) at z = 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gradcam::{cam_from_activation, CamConfig};
use crate::manifest::{Manifest, SubjectRecord};
use crate::model::{he_init, Forward, Param, Regressor, TrainData, TrainHistory, TrainParams};
use crate::volume::{read_vol, Volume3};

/// A two-channel 2D image: coronal mean projection (volume collapsed along
/// z, pixel = (x, y)) and sagittal mean projection (collapsed along x,
/// pixel = (y, z)), both zero-padded to a common height × width. Values are
/// finite and non-negative; layout is channel-major with the first pixel
/// axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Projection2D {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("projection dims must be positive".into()));
        }
        if data.len() != 2 * h * w {
            return Err(Error::LengthMismatch {
                expected: 2 * h * w,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "projection values must be finite and >= 0; offender at {index}"
            )));
        }
        Ok(Projection2D { h, w, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixel (i, j) of channel `c` (0 coronal, 1 sagittal).
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[i + self.h * (j + self.w * c)]
    }

    /// Stores the two channels as a (h, w, 2) volume, the on-disk convention.
    pub fn to_volume(&self) -> Volume3 {
        Volume3::new((self.h, self.w, 2), (1.0, 1.0, 1.0), self.data.clone())
            .expect("projection data is valid volume data")
    }

    /// Reads back a projection written via [`Projection2D::to_volume`].
    pub fn from_volume(v: &Volume3) -> Result<Self> {
        let (h, w, nz) = v.dims();
        if nz != 2 {
            return Err(Error::ShapeMismatch(format!(
                "2-channel projection volume must have nz = 2, got {nz}"
            )));
        }
        Projection2D::new(h, w, v.data().to_vec())
    }
}

/// Per-pixel mean along the collapsed axis for both planes. The volume is
/// expected to be non-negative (images are); means are taken in f64.
pub fn project(v: &Volume3) -> Projection2D {
    let (nx, ny, nz) = v.dims();
    let (h, w) = (nx.max(ny), ny.max(nz));
    let mut data = vec![0.0f32; 2 * h * w];
    for y in 0..ny {
        for x in 0..nx {
            let mut s = 0.0f64;
            for z in 0..nz {
                s += v.at(x, y, z) as f64;
            }
            data[x + h * y] = (s / nz as f64) as f32;
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            let mut s = 0.0f64;
            for x in 0..nx {
                s += v.at(x, y, z) as f64;
            }
            data[h * w + y + h * z] = (s / nx as f64) as f32;
        }
    }
    Projection2D { h, w, data }
}

/// Configuration of the 2D network; mirrors the 3D one with a 2D input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net2dConfig {
    pub channels: (usize, usize, usize),
    pub hidden: usize,
    pub input_dims: (usize, usize),
    pub seed: u64,
}

impl Default for Net2dConfig {
    fn default() -> Self {
        Net2dConfig {
            channels: (8, 16, 32),
            hidden: 256,
            // Projections of the default 32x64x24 volume pad to 64x64.
            input_dims: (64, 64),
            seed: 0,
        }
    }
}

impl Net2dConfig {
    pub fn validate(&self) -> Result<()> {
        let (c1, c2, c3) = self.channels;
        if c1 == 0 || !(c1 < c2 && c2 < c3) {
            return Err(Error::InvalidArgument(format!(
                "stage channels must be positive and increasing, got {:?}",
                self.channels
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be >= 1".into()));
        }
        for n in [self.input_dims.0, self.input_dims.1] {
            let mut e = n;
            for _ in 0..3 {
                if e < 3 {
                    break;
                }
                e = (e - 1) / 2 + 1;
            }
            if e < 3 {
                return Err(Error::InvalidArgument(format!(
                    "input dims {:?} leave a stage with spatial extent < 3",
                    self.input_dims
                )));
            }
        }
        Ok(())
    }
}

/// The 2D age regressor: two-channel stem, three strided residual stages,
/// global average pooling, and the same fully connected head as the 3D net.
#[derive(Debug, Clone)]
pub struct Net2d {
    config: Net2dConfig,
    params: Vec<Param>,
}

impl Net2d {
    pub fn layout(config: &Net2dConfig) -> Vec<(String, Vec<usize>)> {
        let (c1, c2, c3) = config.channels;
        let h = config.hidden;
        let mut out = vec![
            ("stem.w".into(), vec![c1, 2, 3, 3]),
            ("stem.b".into(), vec![c1]),
        ];
        let stage_ch = [(c1, c1), (c1, c2), (c2, c3)];
        for (i, &(ci, co)) in stage_ch.iter().enumerate() {
            let s = format!("stage{}", i + 1);
            out.push((format!("{s}.conv1.w"), vec![co, ci, 3, 3]));
            out.push((format!("{s}.conv1.b"), vec![co]));
            out.push((format!("{s}.conv2.w"), vec![co, co, 3, 3]));
            out.push((format!("{s}.conv2.b"), vec![co]));
            out.push((format!("{s}.proj.w"), vec![co, ci, 1, 1]));
            out.push((format!("{s}.proj.b"), vec![co]));
        }
        out.push(("fc1.w".into(), vec![h, c3]));
        out.push(("fc1.b".into(), vec![h]));
        out.push(("fc2.w".into(), vec![1, h]));
        out.push(("fc2.b".into(), vec![1]));
        out
    }

    pub fn zeros(config: Net2dConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::layout(&config)
            .into_iter()
            .map(|(name, shape)| Param {
                name,
                tensor: Tensor::zeros(shape),
            })
            .collect();
        Ok(Net2d { config, params })
    }

    pub fn init(config: Net2dConfig, output_bias: f32) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        he_init(&mut net.params, net.config.seed);
        net.set_output_bias(output_bias);
        Ok(net)
    }

    pub fn config(&self) -> &Net2dConfig {
        &self.config
    }

    pub fn set_output_bias(&mut self, v: f32) {
        self.params.last_mut().expect("fc2.b exists").tensor.data[0] = v;
    }

    pub fn scale_output_weights(&mut self, s: f32) {
        let n = self.params.len();
        for v in &mut self.params[n - 2].tensor.data {
            *v *= s;
        }
    }

    pub fn forward(&self, proj: &Projection2D) -> Result<Forward> {
        if proj.dims() != self.config.input_dims {
            return Err(Error::ShapeMismatch(format!(
                "projection dims {:?} != net input dims {:?}",
                proj.dims(),
                self.config.input_dims
            )));
        }
        let (h, w) = proj.dims();
        let mut tape = Tape::new();
        let param_nodes: Vec<_> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), true))
            .collect();
        let input_node = tape.leaf(Tensor::new(vec![2, h, w], proj.data.clone())?, false);

        let mut idx = 0usize;
        let mut next = || {
            let i = idx;
            idx += 1;
            param_nodes[i]
        };

        let (stem_w, stem_b) = (next(), next());
        let mut cur = tape.conv2(input_node, stem_w, stem_b, 1)?;
        for _stage in 0..3 {
            let (w1, b1, w2, b2, pw, pb) = (next(), next(), next(), next(), next(), next());
            let c1 = tape.conv2(cur, w1, b1, 2)?;
            let r1 = tape.relu(c1)?;
            let c2 = tape.conv2(r1, w2, b2, 1)?;
            let proj_node = tape.conv2(cur, pw, pb, 2)?;
            let sum = tape.add(c2, proj_node)?;
            cur = tape.relu(sum)?;
        }
        let stage3 = cur;
        let pooled = tape.gap(cur)?;
        let (fc1w, fc1b, fc2w, fc2b) = (next(), next(), next(), next());
        let hid = tape.linear(pooled, fc1w, fc1b)?;
        let hr = tape.relu(hid)?;
        let pred_node = tape.linear(hr, fc2w, fc2b)?;
        let prediction = tape.value(pred_node).data[0];
        Ok(Forward {
            tape,
            prediction,
            pred_node,
            stage3,
            param_nodes,
            input_node,
        })
    }

    pub fn predict(&self, proj: &Projection2D) -> Result<f32> {
        Ok(self.forward(proj)?.prediction)
    }
}

impl Regressor for Net2d {
    type Input = Projection2D;

    fn forward_pass(&self, input: &Projection2D) -> Result<Forward> {
        self.forward(input)
    }

    fn param_lens(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.len()).collect()
    }

    fn apply_updates(&mut self, delta: &[Vec<f32>]) {
        for (p, d) in self.params.iter_mut().zip(delta) {
            for (v, &u) in p.tensor.data.iter_mut().zip(d) {
                *v += u;
            }
        }
    }
}

/// Trains a 2D net on the manifest's train/val splits (volumes are projected
/// on the fly); the output bias starts at the training-split mean age.
pub fn train25d(
    manifest: &Manifest,
    config: Net2dConfig,
    tp: &TrainParams,
) -> Result<(Net2d, TrainHistory)> {
    let data = TrainData::from_manifest(manifest)?.map_inputs(|v| project(&v));
    let mut net = Net2d::init(config, data.train_mean_age())?;
    let history = crate::model::train(&mut net, &data, tp)?;
    Ok((net, history))
}

/// Predicts ages for every record matching `filter`; returns (id, prediction)
/// pairs in manifest order. Values are order-independent.
pub fn predict25d<F>(net: &Net2d, manifest: &Manifest, filter: F) -> Result<Vec<(u64, f64)>>
where
    F: Fn(&SubjectRecord) -> bool,
{
    let mut out = Vec::new();
    for r in manifest.records.iter().filter(|r| filter(r)) {
        let vol = read_vol(manifest.resolve(&r.image_path))?;
        let pred = net.predict(&project(&vol))?;
        out.push((r.id, pred as f64));
    }
    Ok(out)
}

/// 2D saliency map via the shared formula on the third 2D stage; returned as
/// an (h, w, 1) volume on the projection grid.
pub fn cam25d(net: &Net2d, proj: &Projection2D, cfg: &CamConfig) -> Result<Volume3> {
    let mut fw = net.forward(proj)?;
    fw.tape.backward(fw.pred_node, &[fw.stage3])?;
    let grads = fw
        .tape
        .grad(fw.stage3)
        .ok_or_else(|| Error::Numerical("no gradient at the saliency target".into()))?
        .to_vec();
    let acts = fw.tape.value(fw.stage3);
    let lifted = Tensor::new(
        vec![acts.shape[0], acts.shape[1], acts.shape[2], 1],
        acts.data.clone(),
    )?;
    cam_from_activation(&lifted, &grads, (proj.h, proj.w, 1), cfg.normalize)
}
