//! 11-class intensity classifier over flattened window features.
//!
//! The reference model is a two-layer perceptron: `T*D` inputs, one tanh
//! hidden layer, 11 logits. All arithmetic is `f64`; parameters live in one
//! flat vector laid out as `[w1, b1, w2, b2]` with row-major weights. Inputs
//! can pass through a fixed per-column standardization fitted on the first
//! training set the model sees (`standardize_inputs`).

mod checkpoint;
mod external;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use external::{score_external, serve_protocol, ExternalScorer, ScoreRequest, ScoreResponse};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::labeling::NUM_CLASSES;
use crate::segmentation::SegmentDataset;

/// Windows summed per gradient chunk. The chunking is fixed so sums happen in
/// the same order whichever [`Exec`] runs them.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid scorer config: {0}")]
    Config(String),
    #[error("window has {found} values, model expects {expected}")]
    Dims { expected: usize, found: usize },
    #[error("non-finite input feature at index {0}")]
    NonFiniteInput(usize),
    #[error("label {0} outside 0..=10")]
    Label(u8),
    #[error("training set is empty")]
    Empty,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("external scorer protocol violation: {0}")]
    Protocol(String),
    #[error("external scorer timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fit a per-column input standardization when training a model that has
    /// none. Off by default; raw features are used.
    pub standardize_inputs: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            hidden_units: 64,
            learning_rate: 1e-4,
            momentum: 0.9,
            lr_step_epochs: 7,
            lr_gamma: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            standardize_inputs: false,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: &str| Err(ScorerError::Config(m.to_string()));
        if self.hidden_units == 0 {
            return bad("hidden_units must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must be in (0, 1]");
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.lr_step_epochs.max(1);
        self.learning_rate * self.lr_gamma.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    /// Frames per window.
    pub t: usize,
    /// Features per frame.
    pub d: usize,
}

impl InputDims {
    pub fn size(self) -> usize {
        self.t * self.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    dims: InputDims,
    hidden: usize,
    params: Vec<f64>,
    norm: Option<InputNorm>,
    pub log: Vec<EpochLog>,
}

/// `x' = (x - mean[d]) * scale[d]` for every frame of feature column `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    /// Column means and inverse population standard deviations over every
    /// frame of every sample. Constant columns keep scale 1.
    pub fn fit(samples: &[Sample<'_>], dims: InputDims) -> Self {
        let d = dims.d;
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for s in samples {
            for row in s.features.chunks(d) {
                for (a, v) in sum.iter_mut().zip(row) {
                    *a += *v as f64;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|a| a / n.max(1) as f64).collect();
        let mut var = vec![0.0; d];
        for s in samples {
            for row in s.features.chunks(d) {
                for ((a, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (*v as f64 - m).powi(2);
                }
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n.max(1) as f64).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: u8,
    pub probabilities: [f64; NUM_CLASSES],
}

/// One training example: a flattened window and its class.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f32],
    pub label: u8,
}

pub fn param_count(dims: InputDims, hidden: usize) -> usize {
    dims.size() * hidden + hidden + hidden * NUM_CLASSES + NUM_CLASSES
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ScorerModel {
    pub fn zeros(dims: InputDims, hidden: usize) -> Self {
        Self {
            dims,
            hidden,
            params: vec![0.0; param_count(dims, hidden)],
            norm: None,
            log: Vec::new(),
        }
    }

    pub fn from_params(dims: InputDims, hidden: usize, params: Vec<f64>) -> Result<Self, ScorerError> {
        let n = param_count(dims, hidden);
        if params.len() != n {
            return Err(ScorerError::Dims {
                expected: n,
                found: params.len(),
            });
        }
        Ok(Self {
            dims,
            hidden,
            params,
            norm: None,
            log: Vec::new(),
        })
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<(), ScorerError> {
        if let Some(n) = &norm {
            let bad = n.mean.len() != self.dims.d
                || n.scale.len() != self.dims.d
                || n.mean.iter().chain(&n.scale).any(|v| !v.is_finite());
            if bad {
                return Err(ScorerError::Config("input norm must hold D finite means and scales".into()));
            }
        }
        self.norm = norm;
        Ok(())
    }

    fn normalized(&self, x: &[f32]) -> Vec<f64> {
        match &self.norm {
            None => x.iter().map(|v| *v as f64).collect(),
            Some(n) => {
                let d = self.dims.d;
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (*v as f64 - n.mean[i % d]) * n.scale[i % d])
                    .collect()
            }
        }
    }

    fn layout(&self) -> Layout {
        let n_in = self.dims.size();
        let b1 = n_in * self.hidden;
        let w2 = b1 + self.hidden;
        Layout {
            w1: 0,
            b1,
            w2,
            b2: w2 + self.hidden * NUM_CLASSES,
        }
    }

    fn check_input(&self, x: &[f32]) -> Result<(), ScorerError> {
        if x.len() != self.dims.size() {
            return Err(ScorerError::Dims {
                expected: self.dims.size(),
                found: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(ScorerError::NonFiniteInput(i));
        }
        Ok(())
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let n_in = x.len();
        (0..self.hidden)
            .map(|j| {
                let row = &self.params[l.w1 + j * n_in..l.w1 + (j + 1) * n_in];
                let z = row
                    .iter()
                    .zip(x)
                    .fold(self.params[l.b1 + j], |acc, (w, v)| acc + w * v);
                z.tanh()
            })
            .collect()
    }

    fn output(&self, h: &[f64]) -> [f64; NUM_CLASSES] {
        let l = self.layout();
        let mut out = [0.0; NUM_CLASSES];
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.params[l.w2 + c * self.hidden..l.w2 + (c + 1) * self.hidden];
            *o = row
                .iter()
                .zip(h)
                .fold(self.params[l.b2 + c], |acc, (w, v)| acc + w * v);
        }
        out
    }

    pub fn logits(&self, x: &[f32]) -> Result<[f64; NUM_CLASSES], ScorerError> {
        self.check_input(x)?;
        Ok(self.output(&self.hidden_act(&self.normalized(x))))
    }

    pub fn forward(&self, x: &[f32]) -> Result<Prediction, ScorerError> {
        Ok(Prediction::from_logits(&self.logits(x)?))
    }

    pub fn predict(&self, dataset: &SegmentDataset, exec: Exec) -> Result<Vec<Prediction>, ScorerError> {
        exec.try_map_range(dataset.len(), |i| self.forward(dataset.features(i)))
    }

    /// Cross-entropy of one sample, accumulating its gradient into `grad`.
    fn accumulate(&self, s: &Sample<'_>, grad: &mut [f64]) -> f64 {
        let l = self.layout();
        let n_in = s.features.len();
        let x = self.normalized(s.features);
        let h = self.hidden_act(&x);
        let logits = self.output(&h);
        let p = softmax(&logits);
        let y = s.label as usize;
        let loss = log_sum_exp(&logits) - logits[y];

        let mut dh = vec![0.0; self.hidden];
        for c in 0..NUM_CLASSES {
            let dz = p[c] - if c == y { 1.0 } else { 0.0 };
            grad[l.b2 + c] += dz;
            let row = l.w2 + c * self.hidden;
            for j in 0..self.hidden {
                grad[row + j] += dz * h[j];
                dh[j] += dz * self.params[row + j];
            }
        }
        for j in 0..self.hidden {
            let dz = dh[j] * (1.0 - h[j] * h[j]);
            grad[l.b1 + j] += dz;
            let row = l.w1 + j * n_in;
            for (g, v) in grad[row..row + n_in].iter_mut().zip(&x) {
                *g += dz * v;
            }
        }
        loss
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[Sample<'_>], exec: Exec) -> Result<(f64, Vec<f64>), ScorerError> {
        for s in batch {
            self.check_input(s.features)?;
            if s.label as usize >= NUM_CLASSES {
                return Err(ScorerError::Label(s.label));
            }
        }
        if batch.is_empty() {
            return Err(ScorerError::Empty);
        }
        let chunks: Vec<&[Sample<'_>]> = batch.chunks(GRAD_CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| {
            let mut g = vec![0.0; self.params.len()];
            let loss: f64 = chunk.iter().map(|s| self.accumulate(s, &mut g)).sum();
            (loss, g)
        });
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &[Sample<'_>]) -> Result<f64, ScorerError> {
        let mut total = 0.0;
        for s in batch {
            let logits = self.logits(s.features)?;
            total += log_sum_exp(&logits) - logits[s.label as usize];
        }
        Ok(total / batch.len() as f64)
    }
}

impl Prediction {
    pub fn from_logits(logits: &[f64; NUM_CLASSES]) -> Self {
        Self {
            class: argmax(logits) as u8,
            probabilities: softmax(logits),
        }
    }
}

/// Lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|z| (z - m).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn log_sum_exp(logits: &[f64; NUM_CLASSES]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Uniform weights in `±1/sqrt(fan_in)`, zero biases.
pub fn init_model(dims: InputDims, config: &ScorerConfig) -> Result<ScorerModel, ScorerError> {
    config.validate()?;
    if dims.t == 0 || dims.d == 0 {
        return Err(ScorerError::Config("window dims must be at least 1".into()));
    }
    let mut model = ScorerModel::zeros(dims, config.hidden_units);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = model.layout();
    let b1 = 1.0 / (dims.size() as f64).sqrt();
    for w in &mut model.params[l.w1..l.b1] {
        *w = rng.random_range(-b1..b1);
    }
    let b2 = 1.0 / (config.hidden_units as f64).sqrt();
    for w in &mut model.params[l.w2..l.b2] {
        *w = rng.random_range(-b2..b2);
    }
    Ok(model)
}

pub fn forward(model: &ScorerModel, window: &[f32]) -> Result<Prediction, ScorerError> {
    model.forward(window)
}

/// All windows of a dataset with their stored labels.
pub fn dataset_samples(dataset: &SegmentDataset) -> Vec<Sample<'_>> {
    dataset
        .windows()
        .iter()
        .enumerate()
        .map(|(i, w)| Sample {
            features: dataset.features(i),
            label: w.label,
        })
        .collect()
}

/// Mini-batch SGD with classical momentum on mean cross-entropy.
///
/// Samples are reshuffled each epoch with a Fisher-Yates shuffle seeded from
/// `config.seed`. The returned model carries the input log extended by one
/// entry per epoch; the new entries are also returned on their own.
pub fn train_samples(
    model: &ScorerModel,
    samples: &[Sample<'_>],
    config: &ScorerConfig,
    exec: Exec,
) -> Result<(ScorerModel, Vec<EpochLog>), ScorerError> {
    config.validate()?;
    let mut model = model.clone();
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if samples.is_empty() {
        return Err(ScorerError::Empty);
    }
    if config.standardize_inputs && model.norm.is_none() {
        for s in samples {
            model.check_input(s.features)?;
        }
        model.norm = Some(InputNorm::fit(samples, model.dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut velocity = vec![0.0; model.params.len()];
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr_for_epoch(epoch);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample<'_>> = idx.iter().map(|&i| samples[i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch, exec)?;
            if !loss.is_finite() {
                return Err(ScorerError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * batch.len() as f64;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(ScorerError::NonFiniteLoss { epoch, batch: b });
            }
        }
        log.push(EpochLog {
            epoch,
            lr,
            mean_loss: total / samples.len() as f64,
        });
    }
    model.log.extend(log.iter().cloned());
    Ok((model, log))
}

pub fn train(
    model: &ScorerModel,
    dataset: &SegmentDataset,
    config: &ScorerConfig,
    exec: Exec,
) -> Result<(ScorerModel, Vec<EpochLog>), ScorerError> {
    train_samples(model, &dataset_samples(dataset), config, exec)
}

/// Parameters compared by [`grad_check`] when the model is larger than this.
const GRAD_CHECK_SAMPLE: usize = 256;

/// Largest relative error between analytic and central-difference gradients.
///
/// Every parameter is checked for models up to 256 parameters; larger models
/// use a seeded sample of 256 indices. The relative error of one parameter is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    model: &ScorerModel,
    batch: &[Sample<'_>],
    epsilon: f64,
    seed: u64,
) -> Result<f64, ScorerError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(ScorerError::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = model.loss_and_grad(batch, Exec::Sequential)?;
    let n = model.n_params();
    let indices: Vec<usize> = if n <= GRAD_CHECK_SAMPLE {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, n, GRAD_CHECK_SAMPLE).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let p = model.params[i];
        probe.params[i] = p + epsilon;
        let up = probe.loss(batch)?;
        probe.params[i] = p - epsilon;
        let down = probe.loss(batch)?;
        probe.params[i] = p;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
