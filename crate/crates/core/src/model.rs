//! 3D age-regression network: a small residual CNN over body volumes, its
//! training loop (gradient accumulation, Adam, plateau LR schedule), and
//! checkpoint IO.
//!
//! Architecture: stem conv (1 -> c1, stride 1); three residual stages, each
//! conv(s=2) - relu - conv(s=1) with a 1x1x1 stride-2 projection skip and a
//! relu after the add (stage channels c1 -> c1, c1 -> c2, c2 -> c3); global
//! average pooling; fc1 (c3 -> hidden) + relu; fc2 (hidden -> 1). The
//! stage-3 post-relu activation is retained as the saliency-map target.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split, SubjectRecord};
use crate::volume::{read_vol, Volume3};

/// Network shape hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Output channels of the three residual stages; must be strictly
    /// increasing. The stem also emits `channels.0`.
    pub channels: (usize, usize, usize),
    /// Width of the fully connected hidden layer.
    pub hidden: usize,
    /// Expected input volume dims.
    pub input_dims: (usize, usize, usize),
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: (8, 16, 32),
            hidden: 256,
            input_dims: (32, 64, 24),
            seed: 0,
        }
    }
}

impl NetConfig {
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
        let (nx, ny, nz) = self.input_dims;
        // Each stage halves the extent and then applies a 3x3x3 stride-1
        // conv at the halved size, so every extent along the way — including
        // the final one — must stay >= 3.
        for n in [nx, ny, nz] {
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

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) tensor: Tensor,
}

/// Fills every `*.w` parameter with He-initialized weights (normal with
/// variance 2/fan_in, fan_in = product of all non-output axes) from a seeded
/// stream; biases are left untouched.
pub(crate) fn he_init(params: &mut [Param], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        if !p.name.ends_with(".w") {
            continue;
        }
        let fan_in: usize = p.tensor.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut p.tensor.data {
            *v = dist.sample(&mut rng) as f32;
        }
    }
}

/// A model trainable by [`train`]: forward passes run on a tape and expose
/// the prediction plus parameter nodes for gradient accumulation.
pub trait Regressor {
    type Input;
    fn forward_pass(&self, input: &Self::Input) -> Result<Forward>;
    /// Flat lengths of the parameter tensors, in layout order.
    fn param_lens(&self) -> Vec<usize>;
    /// Adds `delta[i]` elementwise to parameter `i`.
    fn apply_updates(&mut self, delta: &[Vec<f32>]);
}

/// The age-regression network: configuration plus a flat, ordered parameter
/// list (the order defines the checkpoint blob layout).
#[derive(Debug, Clone)]
pub struct AgeNet {
    config: NetConfig,
    params: Vec<Param>,
}

/// Result of one forward pass, keeping the tape alive so callers can run
/// backward from either the loss or the raw prediction.
pub struct Forward {
    pub tape: Tape,
    pub prediction: f32,
    /// Scalar prediction node (shape [1]).
    pub pred_node: NodeId,
    /// Stage-3 post-relu activation node, the saliency-map target.
    pub stage3: NodeId,
    /// Parameter nodes in the same order as the network's parameter list.
    pub param_nodes: Vec<NodeId>,
    pub input_node: NodeId,
}

impl AgeNet {
    /// The ordered (name, shape) parameter layout implied by a config.
    pub fn layout(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
        let (c1, c2, c3) = config.channels;
        let h = config.hidden;
        let mut out = vec![
            ("stem.w".into(), vec![c1, 1, 3, 3, 3]),
            ("stem.b".into(), vec![c1]),
        ];
        let stage_ch = [(c1, c1), (c1, c2), (c2, c3)];
        for (i, &(ci, co)) in stage_ch.iter().enumerate() {
            let s = format!("stage{}", i + 1);
            out.push((format!("{s}.conv1.w"), vec![co, ci, 3, 3, 3]));
            out.push((format!("{s}.conv1.b"), vec![co]));
            out.push((format!("{s}.conv2.w"), vec![co, co, 3, 3, 3]));
            out.push((format!("{s}.conv2.b"), vec![co]));
            out.push((format!("{s}.proj.w"), vec![co, ci, 1, 1, 1]));
            out.push((format!("{s}.proj.b"), vec![co]));
        }
        out.push(("fc1.w".into(), vec![h, c3]));
        out.push(("fc1.b".into(), vec![h]));
        out.push(("fc2.w".into(), vec![1, h]));
        out.push(("fc2.b".into(), vec![1]));
        out
    }

    /// All-zero parameters (predicts 0 everywhere); mostly for tests and as
    /// the base for [`AgeNet::init`].
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::layout(&config)
            .into_iter()
            .map(|(name, shape)| Param {
                name,
                tensor: Tensor::zeros(shape),
            })
            .collect();
        Ok(AgeNet { config, params })
    }

    /// He-initialized weights (normal with variance 2/fan_in), zero biases,
    /// and the output bias set to `output_bias` — callers pass the training
    /// set's mean age so the untrained net starts at the mean-prediction
    /// baseline.
    pub fn init(config: NetConfig, output_bias: f32) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        he_init(&mut net.params, net.config.seed);
        net.set_output_bias(output_bias);
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Parameter tensors in layout order.
    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Sets the final-layer bias (the prediction for an all-zero-weight net).
    pub fn set_output_bias(&mut self, v: f32) {
        let p = self.params.last_mut().expect("fc2.b exists");
        p.tensor.data[0] = v;
    }

    pub fn output_bias(&self) -> f32 {
        self.params.last().expect("fc2.b exists").tensor.data[0]
    }

    /// Scales the final-layer weights by `s` (used by saliency-map
    /// equivariance checks).
    pub fn scale_output_weights(&mut self, s: f32) {
        let n = self.params.len();
        for v in &mut self.params[n - 2].tensor.data {
            *v *= s;
        }
    }

    /// One forward pass; the returned [`Forward`] keeps the tape for
    /// backward passes.
    pub fn forward(&self, image: &Volume3) -> Result<Forward> {
        if image.dims() != self.config.input_dims {
            return Err(Error::ShapeMismatch(format!(
                "input dims {:?} != net input dims {:?}",
                image.dims(),
                self.config.input_dims
            )));
        }
        let (nx, ny, nz) = image.dims();
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), true))
            .collect();
        let input_node = tape.leaf(
            Tensor::new(vec![1, nx, ny, nz], image.data().to_vec())?,
            false,
        );

        let mut idx = 0usize;
        let mut next = || {
            let i = idx;
            idx += 1;
            param_nodes[i]
        };

        let (stem_w, stem_b) = (next(), next());
        let mut cur = tape.conv3(input_node, stem_w, stem_b, 1)?;
        for _stage in 0..3 {
            let (w1, b1, w2, b2, pw, pb) = (next(), next(), next(), next(), next(), next());
            let c1 = tape.conv3(cur, w1, b1, 2)?;
            let r1 = tape.relu(c1)?;
            let c2 = tape.conv3(r1, w2, b2, 1)?;
            let proj = tape.conv3(cur, pw, pb, 2)?;
            let sum = tape.add(c2, proj)?;
            cur = tape.relu(sum)?;
        }
        let stage3 = cur;
        let pooled = tape.gap(cur)?;
        let (fc1w, fc1b, fc2w, fc2b) = (next(), next(), next(), next());
        let h = tape.linear(pooled, fc1w, fc1b)?;
        let hr = tape.relu(h)?;
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

    /// Forward pass returning only the scalar prediction.
    pub fn predict(&self, image: &Volume3) -> Result<f32> {
        Ok(self.forward(image)?.prediction)
    }
}

impl Regressor for AgeNet {
    type Input = Volume3;

    fn forward_pass(&self, input: &Volume3) -> Result<Forward> {
        self.forward(input)
    }

    fn param_lens(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.len()).collect()
    }

    fn apply_updates(&mut self, delta: &[Vec<f32>]) {
        for (p, d) in self.params.iter_mut().zip(delta) {
            for (w, &u) in p.tensor.data.iter_mut().zip(d) {
                *w += u;
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    /// Mini-batches accumulated per optimizer step.
    pub accumulation: usize,
    /// Epochs without val-MAE improvement before the LR drops.
    pub patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 30,
            // The default cohort yields ~240 optimizer steps (30 epochs x 240
            // samples / 32-sample accumulation). Adam moves each coordinate at
            // most ~lr per step, so the rate must be large enough for weights
            // to travel a useful distance inside that budget while staying
            // below the ~2e-2 threshold where the first full-strength steps
            // blow up the residual stages. 1e-2 is the largest swept value
            // that trains stably at this scale.
            lr: 1e-2,
            accumulation: 32,
            patience: 3,
            lr_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.accumulation == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "epochs, accumulation, and patience must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::InvalidArgument(
                "lr must be > 0 and lr_factor in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Learning-rate plateau schedule: drop the rate by `factor` after
/// `patience` consecutive epochs without a strict best-MAE improvement.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    patience: usize,
    factor: f64,
    best: Option<f64>,
    since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauSchedule {
            lr,
            patience,
            factor,
            best: None,
            since_improvement: 0,
        }
    }

    /// Records an epoch's validation MAE and returns the LR for the next
    /// epoch.
    pub fn observe(&mut self, val_mae: f64) -> f64 {
        match self.best {
            Some(best) if val_mae < best => {
                self.best = Some(val_mae);
                self.since_improvement = 0;
            }
            Some(_) => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    self.lr *= self.factor;
                    self.since_improvement = 0;
                }
            }
            None => self.best = Some(val_mae),
        }
        self.lr
    }
}

/// Deterministic sample order for one epoch: Fisher-Yates keyed by
/// (seed, epoch). Exposed so tests and tooling can replay the exact order.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// An in-memory labelled training input (a volume by default).
pub struct TrainSample<I = Volume3> {
    pub id: u64,
    pub age: f32,
    pub input: I,
}

/// Preloaded train/val splits.
pub struct TrainData<I = Volume3> {
    pub train: Vec<TrainSample<I>>,
    pub val: Vec<TrainSample<I>>,
}

impl TrainData<Volume3> {
    /// Loads every train- and val-split volume referenced by the manifest.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let load = |split: Split| -> Result<Vec<TrainSample>> {
            manifest
                .split(split)
                .records
                .iter()
                .map(|r| {
                    let input = read_vol(manifest.resolve(&r.image_path))?;
                    Ok(TrainSample {
                        id: r.id,
                        age: r.age as f32,
                        input,
                    })
                })
                .collect()
        };
        Ok(TrainData {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        })
    }
}

impl<I> TrainData<I> {
    /// Maps every sample input through `f`, preserving ids, ages, and split
    /// membership.
    pub fn map_inputs<J>(self, f: impl Fn(I) -> J) -> TrainData<J> {
        let conv = |v: Vec<TrainSample<I>>| {
            v.into_iter()
                .map(|s| TrainSample {
                    id: s.id,
                    age: s.age,
                    input: f(s.input),
                })
                .collect()
        };
        TrainData {
            train: conv(self.train),
            val: conv(self.val),
        }
    }

    /// Mean age over the training split (the standard output-bias seed).
    pub fn train_mean_age(&self) -> f32 {
        let sum: f64 = self.train.iter().map(|s| s.age as f64).sum();
        (sum / self.train.len().max(1) as f64) as f32
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean per-sample MAE loss over the epoch's training pass.
    pub train_loss: f64,
    pub val_mae: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub final_lr: f64,
}

/// Adam optimizer state over the network's flat parameter list.
struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    fn new(lens: &[usize]) -> Self {
        let zeros: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one step from summed gradients over `count` samples
    /// (the mean gradient is `gsum / count`), then clears the buffer.
    fn step<M: Regressor>(
        &mut self,
        net: &mut M,
        gsum: &mut [Vec<f32>],
        count: usize,
        lr: f64,
        tp: &TrainParams,
    ) {
        self.t += 1;
        let bc1 = 1.0 - tp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tp.beta2.powi(self.t as i32);
        let (b1, b2) = (tp.beta1 as f32, tp.beta2 as f32);
        let inv = 1.0 / count as f32;
        let mut updates = Vec::with_capacity(gsum.len());
        for (i, gs) in gsum.iter_mut().enumerate() {
            let mut upd = vec![0.0f32; gs.len()];
            for (j, g) in gs.iter_mut().enumerate() {
                let grad = *g * inv;
                let m = b1 * self.m[i][j] + (1.0 - b1) * grad;
                let v = b2 * self.v[i][j] + (1.0 - b2) * grad * grad;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let mhat = m as f64 / bc1;
                let vhat = v as f64 / bc2;
                upd[j] = (-(lr * mhat / (vhat.sqrt() + tp.eps))) as f32;
                *g = 0.0;
            }
            updates.push(upd);
        }
        net.apply_updates(&updates);
    }
}

/// Mean absolute error of the net over a sample set.
pub fn evaluate<M: Regressor>(net: &M, samples: &[TrainSample<M::Input>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluate over empty split".into()));
    }
    let mut sum = 0.0f64;
    for s in samples {
        sum += (net.forward_pass(&s.input)?.prediction as f64 - s.age as f64).abs();
    }
    Ok(sum / samples.len() as f64)
}

/// Trains the net in place. Per mini-batch (one sample), gradients
/// accumulate; every `accumulation` samples — and once more at epoch end for
/// any leftover window — the averaged gradient is applied with one Adam step.
/// Validation MAE is computed after each epoch and drives the plateau LR
/// schedule.
pub fn train<M: Regressor>(
    net: &mut M,
    data: &TrainData<M::Input>,
    tp: &TrainParams,
) -> Result<TrainHistory> {
    tp.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument(
            "training requires non-empty train and val splits".into(),
        ));
    }
    let lens = net.param_lens();
    let mut adam = AdamState::new(&lens);
    let mut sched = PlateauSchedule::new(tp.lr, tp.patience, tp.lr_factor);
    let mut gsum: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut history = Vec::with_capacity(tp.epochs);

    for epoch in 0..tp.epochs {
        let order = epoch_order(tp.seed, epoch as u64, data.train.len());
        let mut in_window = 0usize;
        let mut loss_sum = 0.0f64;
        for &si in &order {
            let sample = &data.train[si];
            let mut fw = match net.forward_pass(&sample.input) {
                Ok(fw) => fw,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Numerical(format!(
                        "non-finite activation at epoch {epoch}, subject {}",
                        sample.id
                    )))
                }
                Err(e) => return Err(e),
            };
            let loss_node = fw.tape.mae_loss(fw.pred_node, &[sample.age])?;
            let loss = fw.tape.value(loss_node).data[0];
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, subject {}: prediction {}",
                    sample.id, fw.prediction
                )));
            }
            loss_sum += loss as f64;
            fw.tape.backward(loss_node, &[])?;
            for (gs, &pn) in gsum.iter_mut().zip(&fw.param_nodes) {
                let g = fw.tape.grad(pn).expect("parameter gradient");
                for (a, &b) in gs.iter_mut().zip(g) {
                    *a += b;
                }
            }
            in_window += 1;
            if in_window == tp.accumulation {
                adam.step(net, &mut gsum, in_window, sched.lr, tp);
                in_window = 0;
            }
        }
        if in_window > 0 {
            adam.step(net, &mut gsum, in_window, sched.lr, tp);
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_mae = evaluate(net, &data.val)?;
        if !val_mae.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation MAE at epoch {epoch}"
            )));
        }
        let lr_used = sched.lr;
        sched.observe(val_mae);
        history.push(EpochStats {
            train_loss,
            val_mae,
            lr: lr_used,
        });
    }
    Ok(TrainHistory {
        epochs: history,
        final_lr: sched.lr,
    })
}

/// Fills `predicted_age` for every record matching `filter`, reading each
/// subject's volume relative to the manifest root. Results depend only on
/// the record, never on evaluation order.
pub fn predict_manifest<F>(net: &AgeNet, manifest: &mut Manifest, filter: F) -> Result<usize>
where
    F: Fn(&SubjectRecord) -> bool,
{
    let mut n = 0usize;
    let root_resolve: Vec<(usize, std::path::PathBuf)> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| filter(r))
        .map(|(i, r)| (i, manifest.resolve(&r.image_path)))
        .collect();
    for (i, path) in root_resolve {
        let vol = read_vol(&path)?;
        let pred = net.predict(&vol)?;
        manifest.records[i].predicted_age = Some(pred as f64);
        n += 1;
    }
    Ok(n)
}

const CKPT_MAGIC: &[u8; 8] = b"AGEN0001";

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: NetConfig,
    params: Vec<CkptParam>,
}

/// Writes the net as magic, little-endian u32 JSON-header length, JSON
/// header (config plus ordered parameter layout), then all parameter values
/// as little-endian f32 in header order.
pub fn save_ckpt(net: &AgeNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CkptHeader {
        config: net.config.clone(),
        params: net
            .params
            .iter()
            .map(|p| CkptParam {
                name: p.name.clone(),
                shape: p.tensor.shape.clone(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Header(format!("checkpoint header: {e}")))?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        for p in &net.params {
            for v in &p.tensor.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, validating magic, header schema, the parameter
/// layout against the stored config, and the blob length.
pub fn load_ckpt(path: impl AsRef<Path>) -> Result<AgeNet> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
    let header: CkptHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Header(format!("checkpoint header: {e}")))?;
    header.config.validate()?;

    let expected = AgeNet::layout(&header.config);
    if header.params.len() != expected.len() {
        return Err(Error::Header(format!(
            "checkpoint lists {} parameters, config implies {}",
            header.params.len(),
            expected.len()
        )));
    }
    for (got, (name, shape)) in header.params.iter().zip(&expected) {
        if &got.name != name || &got.shape != shape {
            return Err(Error::Header(format!(
                "parameter {} has shape {:?}, config implies {} {:?}",
                got.name, got.shape, name, shape
            )));
        }
    }

    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    if blob.len() != total * 4 {
        return Err(Error::LengthMismatch {
            expected: total * 4,
            found: blob.len(),
        });
    }
    let mut params = Vec::with_capacity(expected.len());
    let mut off = 0usize;
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = blob[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += 4 * n;
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(AgeNet {
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::write_vol;

    fn test_config() -> NetConfig {
        NetConfig {
            channels: (2, 3, 4),
            hidden: 8,
            input_dims: (20, 20, 20),
            seed: 7,
        }
    }

    fn noise_volume(dims: (usize, usize, usize), seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Volume3::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn zero_net_predicts_zero() {
        let net = AgeNet::zeros(NetConfig::default()).unwrap();
        let vol = noise_volume((32, 64, 24), 1);
        assert_eq!(net.predict(&vol).unwrap(), 0.0);
    }

    #[test]
    fn output_bias_is_the_zero_net_prediction() {
        let mut net = AgeNet::zeros(NetConfig::default()).unwrap();
        net.set_output_bias(63.58);
        let vol = noise_volume((32, 64, 24), 2);
        assert_eq!(net.predict(&vol).unwrap(), 63.58);
    }

    #[test]
    fn stage3_activation_shape_matches_default_geometry() {
        let net = AgeNet::init(NetConfig::default(), 60.0).unwrap();
        let vol = noise_volume((32, 64, 24), 3);
        let fw = net.forward(&vol).unwrap();
        assert_eq!(fw.tape.value(fw.stage3).shape, vec![32, 4, 8, 3]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = AgeNet::init(NetConfig::default(), 60.0).unwrap();
        let vol = noise_volume((32, 64, 24), 4);
        let a = net.predict(&vol).unwrap();
        let b = net.predict(&vol).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let net = AgeNet::zeros(NetConfig::default()).unwrap();
        let vol = noise_volume((16, 16, 16), 5);
        assert!(net.predict(&vol).is_err());
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut c = NetConfig::default();
        c.channels = (8, 8, 16);
        assert!(c.validate().is_err());
        c = NetConfig::default();
        c.hidden = 0;
        assert!(c.validate().is_err());
        c = NetConfig::default();
        c.input_dims = (16, 16, 16); // 16 -> 8 -> 4 -> conv k3 on extent 2
        assert!(c.validate().is_err());
        assert!(NetConfig::default().validate().is_ok());
        assert!(test_config().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = AgeNet::init(test_config(), 50.0).unwrap();
        let b = AgeNet::init(test_config(), 50.0).unwrap();
        for (ta, tb) in a.param_tensors().zip(b.param_tensors()) {
            assert_eq!(ta.data, tb.data);
        }
        let mut other = test_config();
        other.seed = 8;
        let c = AgeNet::init(other, 50.0).unwrap();
        let differs = a
            .param_tensors()
            .zip(c.param_tensors())
            .any(|(ta, tc)| ta.data != tc.data);
        assert!(differs);
    }

    #[test]
    fn plateau_drops_after_three_flat_epochs() {
        let mut s = PlateauSchedule::new(1e-4, 3, 0.1);
        assert_eq!(s.observe(5.0), 1e-4); // epoch 1: first value becomes best
        assert_eq!(s.observe(5.0), 1e-4); // epoch 2
        assert_eq!(s.observe(5.0), 1e-4); // epoch 3
        let lr = s.observe(5.0); // epoch 4: third flat epoch in a row
        assert!((lr - 1e-5).abs() < 1e-12);
        // Improvement resets the counter.
        let mut s = PlateauSchedule::new(1e-4, 3, 0.1);
        s.observe(5.0);
        s.observe(5.0);
        s.observe(4.0); // improvement
        s.observe(4.5);
        s.observe(4.5);
        assert_eq!(s.lr, 1e-4);
        let lr = s.observe(4.5);
        assert!((lr - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(9, 0, 100);
        let b = epoch_order(9, 0, 100);
        assert_eq!(a, b);
        let c = epoch_order(9, 1, 100);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    fn tiny_dataset(n_train: usize, n_val: usize) -> TrainData {
        let dims = (20, 20, 20);
        let mk = |i: u64, base: u64| TrainSample {
            id: i,
            age: 46.0 + (i % 36) as f32,
            input: noise_volume(dims, base + i),
        };
        TrainData {
            train: (0..n_train as u64).map(|i| mk(i, 1000)).collect(),
            val: (0..n_val as u64).map(|i| mk(i, 2000)).collect(),
        }
    }

    /// Reimplementation of one Adam step from a mean gradient, used as the
    /// recomputation oracle for the accumulation contract.
    fn manual_first_adam_step(
        net0: &AgeNet,
        mean_grads: &[Vec<f32>],
        tp: &TrainParams,
    ) -> Vec<Vec<f32>> {
        let bc1 = 1.0 - tp.beta1;
        let bc2 = 1.0 - tp.beta2;
        net0.param_tensors()
            .zip(mean_grads)
            .map(|(t, g)| {
                t.data
                    .iter()
                    .zip(g)
                    .map(|(&w, &grad)| {
                        let m = (1.0 - tp.beta1 as f32) * grad;
                        let v = (1.0 - tp.beta2 as f32) * grad * grad;
                        let mhat = m as f64 / bc1;
                        let vhat = v as f64 / bc2;
                        w + (-(tp.lr * mhat / (vhat.sqrt() + tp.eps))) as f32
                    })
                    .collect()
            })
            .collect()
    }

    /// One epoch whose sample count fits in a single accumulation window
    /// (full or leftover) must apply exactly one Adam step built from the
    /// mean of the per-sample gradients.
    fn assert_single_step_equivalence(n_samples: usize) {
        let data = tiny_dataset(n_samples, 2);
        let tp = TrainParams {
            epochs: 1,
            ..TrainParams::default()
        };
        let net0 = AgeNet::init(test_config(), 60.0).unwrap();

        // Oracle: mean per-sample gradient at the initial weights, summed in
        // the same shuffled order the trainer visits.
        let order = epoch_order(tp.seed, 0, n_samples);
        let mut gsum: Vec<Vec<f32>> = net0.param_tensors().map(|t| vec![0.0; t.len()]).collect();
        for &si in &order {
            let s = &data.train[si];
            let mut fw = net0.forward(&s.input).unwrap();
            let l = fw.tape.mae_loss(fw.pred_node, &[s.age]).unwrap();
            fw.tape.backward(l, &[]).unwrap();
            for (gs, &pn) in gsum.iter_mut().zip(&fw.param_nodes) {
                for (a, &b) in gs.iter_mut().zip(fw.tape.grad(pn).unwrap()) {
                    *a += b;
                }
            }
        }
        for gs in &mut gsum {
            for g in gs.iter_mut() {
                *g /= n_samples as f32;
            }
        }
        let expected = manual_first_adam_step(&net0, &gsum, &tp);

        let mut net = net0.clone();
        train(&mut net, &data, &tp).unwrap();
        for (t, e) in net.param_tensors().zip(&expected) {
            for (&got, &want) in t.data.iter().zip(e) {
                assert!(
                    (got - want).abs() < 1e-5,
                    "trained {got} vs recomputed {want}"
                );
            }
        }
    }

    #[test]
    fn full_window_applies_one_mean_gradient_step() {
        assert_single_step_equivalence(32);
    }

    #[test]
    fn leftover_window_is_flushed_as_one_mean_step() {
        assert_single_step_equivalence(17);
    }

    #[test]
    fn history_records_every_epoch() {
        let data = tiny_dataset(4, 2);
        let tp = TrainParams {
            epochs: 3,
            accumulation: 2,
            ..TrainParams::default()
        };
        let mut net = AgeNet::init(test_config(), 60.0).unwrap();
        let h = train(&mut net, &data, &tp).unwrap();
        assert_eq!(h.epochs.len(), 3);
        assert!(h.epochs.iter().all(|e| e.lr > 0.0 && e.train_loss.is_finite()));
    }

    #[test]
    fn hundred_epoch_configuration_is_accepted() {
        let tp = TrainParams {
            epochs: 100,
            ..TrainParams::default()
        };
        assert!(tp.validate().is_ok());
    }

    #[test]
    fn empty_splits_are_rejected() {
        let mut net = AgeNet::init(test_config(), 60.0).unwrap();
        let tp = TrainParams::default();
        let no_train = TrainData {
            train: vec![],
            val: tiny_dataset(1, 1).val,
        };
        assert!(train(&mut net, &no_train, &tp).is_err());
        let no_val = TrainData {
            train: tiny_dataset(1, 1).train,
            val: vec![],
        };
        assert!(train(&mut net, &no_val, &tp).is_err());
    }

    #[test]
    fn diverging_run_aborts_with_diagnostics() {
        let data = tiny_dataset(3, 1);
        let tp = TrainParams {
            epochs: 50,
            accumulation: 1,
            lr: 1e30,
            ..TrainParams::default()
        };
        let mut net = AgeNet::init(test_config(), 60.0).unwrap();
        let err = train(&mut net, &data, &tp).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "unexpected error: {msg}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = AgeNet::init(test_config(), 60.0).unwrap();
        let vol = noise_volume((20, 20, 20), 11);
        let before = net.predict(&vol).unwrap();
        save_ckpt(&net, &path).unwrap();
        let loaded = load_ckpt(&path).unwrap();
        let after = loaded.predict(&vol).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
        for (a, b) in net.param_tensors().zip(loaded.param_tensors()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = AgeNet::zeros(test_config()).unwrap();
        save_ckpt(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_ckpt(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn parameter_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = AgeNet::zeros(test_config()).unwrap();
        save_ckpt(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_ckpt(&path),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn layout_mismatch_in_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = AgeNet::zeros(test_config()).unwrap();
        save_ckpt(&net, &path).unwrap();
        // Rewrite the header with one shape altered; keep the blob.
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header["params"][0]["shape"][0] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[12 + hlen..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(load_ckpt(&path), Err(Error::Header(_))));
    }

    #[test]
    fn predict_manifest_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let dims = (20, 20, 20);
        let mut records = Vec::new();
        for i in 0..4u64 {
            let rel = format!("subj_{i}.vol");
            write_vol(&noise_volume(dims, 300 + i), root.join(&rel)).unwrap();
            records.push(SubjectRecord {
                id: i,
                age: 50 + i as u32,
                sex: crate::manifest::Sex::F,
                bmi_group: crate::manifest::BmiGroup::Healthy,
                split: Split::Test,
                image_path: rel.into(),
                cam_path: None,
                field_path: None,
                predicted_age: None,
                corrected_age: None,
            });
        }
        let net = AgeNet::init(test_config(), 55.0).unwrap();
        let mut fwd = Manifest::new(records.clone(), root.to_path_buf()).unwrap();
        predict_manifest(&net, &mut fwd, |_| true).unwrap();
        let mut rev_records = records;
        rev_records.reverse();
        let mut rev = Manifest::new(rev_records, root.to_path_buf()).unwrap();
        predict_manifest(&net, &mut rev, |_| true).unwrap();
        for r in &fwd.records {
            let other = rev.records.iter().find(|o| o.id == r.id).unwrap();
            assert_eq!(
                r.predicted_age.unwrap().to_bits(),
                other.predicted_age.unwrap().to_bits()
            );
        }
        // Missing volume file surfaces as an IO error.
        let mut missing = Manifest::new(
            vec![SubjectRecord {
                id: 99,
                age: 50,
                sex: crate::manifest::Sex::M,
                bmi_group: crate::manifest::BmiGroup::Obese,
                split: Split::Test,
                image_path: "nope.vol".into(),
                cam_path: None,
                field_path: None,
                predicted_age: None,
                corrected_age: None,
            }],
            root.to_path_buf(),
        )
        .unwrap();
        assert!(predict_manifest(&net, &mut missing, |_| true).is_err());
    }
}
