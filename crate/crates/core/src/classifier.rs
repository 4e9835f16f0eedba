//! Per-stream multinomial logistic regression trained with minibatch SGD.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Reader, StratifiedSampler};
use crate::error::{domain, Error, Result};

/// Magic bytes opening a model file.
pub const MODEL_MAGIC: &[u8; 5] = b"LUSM1";

/// Tolerance on the total mass of a score vector.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over the classes of one taxonomy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        check_distribution(&scores)?;
        Ok(ScoreVector(scores))
    }

    pub fn uniform(n: usize) -> Self {
        ScoreVector(vec![1.0 / n as f64; n])
    }

    pub(crate) fn from_raw(scores: Vec<f64>) -> Self {
        ScoreVector(scores)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_distribution(y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(domain("empty score vector"));
    }
    if y.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(domain("score vector has negative or non-finite entries"));
    }
    let s: f64 = y.iter().sum();
    if (s - 1.0).abs() > SCORE_SUM_TOLERANCE {
        return Err(domain(format!("score vector sums to {s}, not 1")));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Linear softmax head `softmax(W x + b)` for one feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub stream: String,
    classes: usize,
    dim: usize,
    /// Row-major `classes x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxModel {
    /// Zero-initialised model.
    pub fn new(classes: usize, dim: usize, stream: impl Into<String>) -> Result<Self> {
        if classes < 1 || dim < 1 {
            return Err(domain(format!("model shape must be positive, got {classes}x{dim}")));
        }
        Ok(SoftmaxModel {
            stream: stream.into(),
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        })
    }

    pub fn from_parts(stream: impl Into<String>, classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 1 || dim < 1 || weights.len() != classes * dim || bias.len() != classes {
            return Err(domain("weight and bias lengths do not match the model shape"));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(domain("model parameters must be finite"));
        }
        Ok(SoftmaxModel { stream: stream.into(), classes, dim, weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(domain(format!("feature vector has dimension {}, model expects {}", x.len(), self.dim)));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ScoreVector> {
        Ok(ScoreVector::from_raw(softmax(&self.logits(x)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("cannot read model {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load(format!("model {}: {e}", path.display())))
    }

    /// `LUSM1`, u32 classes, u32 dim, u32 name length, name, W row-major, b;
    /// integers and f64s little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.stream.len() + 8 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.stream.len() as u32).to_le_bytes());
        out.extend_from_slice(self.stream.as_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(5).map_err(|_| "file too short for header")?;
        if magic != MODEL_MAGIC {
            return Err("bad magic, expected LUSM1 model format".into());
        }
        let classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let name_len = r.u32()? as usize;
        let stream = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "stream name is not UTF-8")?;
        let n_weights = classes.checked_mul(dim).ok_or("model shape overflows")?;
        let weights = (0..n_weights).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let bias = (0..classes).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err("trailing bytes after model parameters".into());
        }
        SoftmaxModel::from_parts(stream, classes, dim, weights, bias).map_err(|e| e.to_string())
    }
}

/// One training example viewed through a single stream.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Row-major, same layout as the model weights.
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Weighted-mean cross-entropy and its analytic gradient.
///
/// The loss is `sum_i w_i * CE_i / sum_i w_i`; if every weight is zero the
/// loss and both gradients are zero.
pub fn loss_grad(model: &SoftmaxModel, batch: &[Example<'_>], weights: &[f64]) -> Result<LossGrad> {
    if weights.len() != batch.len() {
        return Err(domain(format!("{} weights for {} examples", weights.len(), batch.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(domain("sample weights must be finite and non-negative"));
    }
    let (n, d) = (model.classes, model.dim);
    let mut out = LossGrad { loss: 0.0, grad_weights: vec![0.0; n * d], grad_bias: vec![0.0; n] };
    let total: f64 = weights.iter().sum();
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let label = ex.label.ok_or_else(|| domain("unlabeled example in a training batch"))?;
        if label >= n {
            return Err(domain(format!("label {label} out of range for a {n}-class model")));
        }
        labels.push(label);
    }
    if total == 0.0 {
        return Ok(out);
    }
    for ((ex, &w), label) in batch.iter().zip(weights).zip(labels) {
        if w == 0.0 {
            continue;
        }
        let z = model.logits(ex.features)?;
        let scale = w / total;
        out.loss += scale * (log_sum_exp(&z) - z[label]);
        let mut g = softmax(&z);
        g[label] -= 1.0;
        for (k, gk) in g.iter().enumerate() {
            let gk = scale * gk;
            out.grad_bias[k] += gk;
            for (gw, x) in out.grad_weights[k * d..(k + 1) * d].iter_mut().zip(ex.features) {
                *gw += gk * x;
            }
        }
    }
    Ok(out)
}

/// Step-decayed SGD schedule: `lr(e) = initial_lr / decay_factor^floor(e / decay_every)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each batch drawn from domain A.
    pub domain_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    /// Stage-one training: 0.01, divided by 10 every 5 epochs, 12 epochs, batch 256.
    pub fn stage_one(seed: u64) -> Self {
        Schedule {
            initial_lr: 0.01,
            decay_factor: 10.0,
            decay_every: 5,
            total_epochs: 12,
            batch_size: 256,
            seed,
            domain_ratio: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    /// Second-stage fine-tuning: 1e-5, divided by 10 every epoch, 4 epochs.
    pub fn finetune(seed: u64) -> Self {
        Schedule { initial_lr: 1e-5, decay_every: 1, total_epochs: 4, ..Self::stage_one(seed) }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr / self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.initial_lr));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!("decay factor must be positive, got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        StratifiedSampler::new(self.batch_size, self.domain_ratio, self.seed)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SoftmaxModel,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Validation accuracy after each epoch; empty without a validation split.
    pub val_accuracy: Vec<f64>,
}

/// Fraction of labeled records whose argmax prediction matches the label.
pub fn accuracy(model: &SoftmaxModel, records: &[ImageRecord]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in records {
        let Some(label) = r.label else { continue };
        total += 1;
        if model.forward(r.stream(&model.stream)?)?.argmax() == label {
            correct += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Plain SGD with unit sample weights over stratified batches.
pub fn train(model: &SoftmaxModel, records: &[ImageRecord], schedule: &Schedule, validation: Option<&[ImageRecord]>) -> Result<TrainOutcome> {
    sgd(model, records, schedule, validation, |_, batch| Ok(vec![1.0; batch.len()]))
}

/// Shared SGD loop. `weigh` sees the model as it stands before each batch
/// update and returns one loss weight per example.
pub(crate) fn sgd<F>(
    model: &SoftmaxModel,
    records: &[ImageRecord],
    schedule: &Schedule,
    validation: Option<&[ImageRecord]>,
    mut weigh: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&SoftmaxModel, &[Example<'_>]) -> Result<Vec<f64>>,
{
    schedule.validate()?;
    let sampler = StratifiedSampler::new(schedule.batch_size, schedule.domain_ratio, schedule.seed)?;
    let mut model = model.clone();
    let mut velocity_w = vec![0.0; model.weights.len()];
    let mut velocity_b = vec![0.0; model.bias.len()];
    let mut loss_trace = Vec::with_capacity(schedule.total_epochs);
    let mut val_accuracy = Vec::new();

    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        let batches = sampler.epoch(records, epoch)?;
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "{} records do not fill a single batch of {}",
                records.len(),
                schedule.batch_size
            )));
        }
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let examples = batch
                .indices
                .iter()
                .map(|&i| {
                    let r = &records[i];
                    Ok(Example { features: r.stream(&model.stream)?, label: r.label })
                })
                .collect::<Result<Vec<_>>>()?;
            let weights = weigh(&model, &examples)?;
            let lg = loss_grad(&model, &examples, &weights)?;
            epoch_loss += lg.loss;
            apply_step(&mut model.weights, &lg.grad_weights, &mut velocity_w, lr, schedule.momentum, schedule.weight_decay);
            apply_step(&mut model.bias, &lg.grad_bias, &mut velocity_b, lr, schedule.momentum, 0.0);
        }
        loss_trace.push(epoch_loss / batches.len() as f64);
        if let Some(val) = validation {
            val_accuracy.push(accuracy(&model, val)?);
        }
    }
    Ok(TrainOutcome { model, loss_trace, val_accuracy })
}

fn apply_step(params: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
