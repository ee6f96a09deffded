//! Per-input surrogate of the target classifier.
//!
//! The surrogate maps a coalition indicator `b ∈ {0,1}^n` to class
//! probabilities as `softmax(fc(h(b)))`, where `fc` is a copy of the target's
//! final linear layer and `h` is a small trainable map into the target's
//! feature space. It is trained for a single image on coalitions labelled
//! with the target's full output distribution (soft-label cross-entropy).
//!
//! Three variants:
//! * [`SurrogateMode::Pie`]: `fc` copied from the target and frozen; only `h` trains.
//! * [`SurrogateMode::PieNoSharing`]: same shape, but `fc` is freshly initialised and trained with `h`.
//! * [`SurrogateMode::Linear`]: a single affine map `n -> num_classes` before the softmax.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{EacError, Result};
use crate::masking::{check_size, Coalition, CoalitionModel, DirectModel};
use crate::model::{argmax, softmax, FcLayer, ProbVec};
use crate::rng::chacha;
use crate::shapley::UtilityKind;

const CHECKPOINT_VERSION: u32 = 1;

// ChaCha8 stream ids, one per stochastic choice.
const STREAM_SAMPLING: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_INIT: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    Pie,
    PieNoSharing,
    Linear,
}

impl SurrogateMode {
    pub fn utility_kind(self) -> UtilityKind {
        match self {
            SurrogateMode::Pie => UtilityKind::Pie,
            SurrogateMode::PieNoSharing => UtilityKind::PieNoSharing,
            SurrogateMode::Linear => UtilityKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieConfig {
    pub num_samples: usize,
    pub holdout_fraction: f64,
    /// Width of an optional rectified hidden layer inside `h`.
    pub hidden_width: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PieConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            holdout_fraction: 0.2,
            hidden_width: None,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PieConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(EacError::InvalidConfig(msg));
        if self.num_samples < 2 + n {
            return bad(format!(
                "num_samples must be at least n + 2 = {}, got {}",
                n + 2,
                self.num_samples
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return bad(format!(
                "holdout_fraction must lie in (0, 0.5), got {}",
                self.holdout_fraction
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.hidden_width == Some(0) {
            return bad("hidden_width must be positive when set".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub coalition: Coalition,
    pub target_dist: ProbVec,
}

/// Draws `num_samples` coalitions (each bit Bernoulli(0.5)) and labels them
/// with the target's output distribution on the masked image.
///
/// The empty and full coalitions come first. Coalitions are distinct when
/// `2^n >= num_samples`; otherwise repeats are kept so the length still
/// matches. Each distinct coalition hits the model once.
pub fn sample_dataset(direct: &DirectModel<'_>, config: &PieConfig) -> Result<Vec<TrainSample>> {
    let n = direct.scene.n();
    config.validate(n)?;
    let coalitions = sample_coalitions(n, config.num_samples, config.seed);

    let mut unique: Vec<&Coalition> = Vec::new();
    let mut index: HashMap<&Coalition, usize> = HashMap::new();
    for c in &coalitions {
        index.entry(c).or_insert_with(|| {
            unique.push(c);
            unique.len() - 1
        });
    }
    let labels = unique
        .par_iter()
        .map(|c| direct.predict(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(coalitions
        .iter()
        .map(|c| TrainSample {
            coalition: c.clone(),
            target_dist: labels[index[c]].clone(),
        })
        .collect())
}

fn sample_coalitions(n: usize, count: usize, seed: u64) -> Vec<Coalition> {
    let mut rng = chacha(seed, STREAM_SAMPLING);
    let distinct = n >= 63 || (1u64 << n) >= count as u64;
    let mut out = vec![Coalition::empty(n), Coalition::full(n)];
    let mut seen: std::collections::HashSet<Coalition> = out.iter().cloned().collect();
    if n == 0 {
        out.truncate(1);
    }
    while out.len() < count {
        let words = (0..n.div_ceil(64)).map(|_| rng.random::<u64>()).collect();
        let c = Coalition::from_words(n, words);
        if distinct && !seen.insert(c.clone()) {
            continue;
        }
        out.push(c);
    }
    out.truncate(count);
    out
}

/// Deterministic train/holdout split; returns `(train, holdout)`.
pub fn split_samples<'a>(
    samples: &'a [TrainSample],
    config: &PieConfig,
) -> (Vec<&'a TrainSample>, Vec<&'a TrainSample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut chacha(config.seed, STREAM_SPLIT));
    let holdout = ((samples.len() as f64 * config.holdout_fraction).round() as usize)
        .clamp(1, samples.len().saturating_sub(1).max(1));
    let (held, train) = order.split_at(holdout);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| &samples[i]).collect()
    };
    (pick(train), pick(held))
}

/// Affine layer, `weight` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn from_fc(fc: &FcLayer) -> Self {
        Self {
            inputs: fc.in_features(),
            outputs: fc.num_classes(),
            weight: fc.weight.iter().flatten().copied().collect(),
            bias: fc.bias.clone(),
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.weight.iter().chain(&self.bias) {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Default)]
struct Grad {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Grad,
    v: Grad,
}

/// Trained (or freshly initialised) surrogate `f'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    format_version: u32,
    mode: SurrogateMode,
    n: usize,
    num_classes: usize,
    /// Feature width `m`; zero in linear mode.
    feature_dim: usize,
    /// Trainable layers of `h` (linear mode: the single `n -> classes` map),
    /// rectified between consecutive layers.
    h_layers: Vec<Dense>,
    /// Copy of the target's linear layer; absent in linear mode.
    fc: Option<Dense>,
}

impl Surrogate {
    pub fn new(mode: SurrogateMode, fc: &FcLayer, n: usize, config: &PieConfig) -> Self {
        let mut rng = chacha(config.seed, STREAM_INIT);
        let m = fc.in_features();
        let classes = fc.num_classes();
        let (h_layers, fc, feature_dim) = match mode {
            SurrogateMode::Linear => (vec![Dense::glorot(n, classes, &mut rng)], None, 0),
            SurrogateMode::Pie | SurrogateMode::PieNoSharing => {
                let h = match config.hidden_width {
                    Some(width) => vec![
                        Dense::glorot(n, width, &mut rng),
                        Dense::glorot(width, m, &mut rng),
                    ],
                    None => vec![Dense::glorot(n, m, &mut rng)],
                };
                let head = if mode == SurrogateMode::Pie {
                    Dense::from_fc(fc)
                } else {
                    Dense::glorot(m, classes, &mut rng)
                };
                (h, Some(head), m)
            }
        };
        Self {
            format_version: CHECKPOINT_VERSION,
            mode,
            n,
            num_classes: classes,
            feature_dim,
            h_layers,
            fc,
        }
    }

    pub fn mode(&self) -> SurrogateMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn h_layers(&self) -> &[Dense] {
        &self.h_layers
    }

    pub fn fc(&self) -> Option<&Dense> {
        self.fc.as_ref()
    }

    /// SHA-256 of the linear head's parameters (little-endian f64, weights then bias).
    pub fn fc_checksum(&self) -> Option<String> {
        self.fc.as_ref().map(Dense::checksum)
    }

    fn fc_trainable(&self) -> bool {
        self.mode == SurrogateMode::PieNoSharing
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.h_layers.iter().chain(self.fc.as_ref())
    }

    /// Rectifier after layer `k`? Only between layers of `h`.
    fn relu_after(&self, k: usize) -> bool {
        k + 1 < self.h_layers.len()
    }

    /// Returns every layer's input plus the final logits.
    fn forward_cached(&self, b: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.h_layers.len() + 1);
        let mut x = b.to_vec();
        let mut out = Vec::new();
        for (k, layer) in self.layers().enumerate() {
            layer.forward(&x, &mut out);
            if self.relu_after(k) {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut x, out.clone()));
        }
        (inputs, x)
    }

    pub fn logits(&self, s: &Coalition) -> Result<Vec<f64>> {
        check_size(s, self.n)?;
        let mut x = s.indicator();
        let mut out = Vec::new();
        for (k, layer) in self.layers().enumerate() {
            layer.forward(&x, &mut out);
            if self.relu_after(k) {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut x, &mut out);
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| EacError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| EacError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EacError::io(path, e))?;
        let s: Surrogate = serde_json::from_slice(&bytes).map_err(|source| EacError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if s.format_version != CHECKPOINT_VERSION {
            return Err(EacError::InvalidConfig(format!(
                "unsupported surrogate checkpoint version {}",
                s.format_version
            )));
        }
        Ok(s)
    }
}

impl CoalitionModel for Surrogate {
    fn n(&self) -> usize {
        self.n
    }

    fn predict(&self, s: &Coalition) -> Result<ProbVec> {
        surrogate_predict(self, s)
    }

    fn kind(&self) -> UtilityKind {
        self.mode.utility_kind()
    }
}

pub fn surrogate_predict(surrogate: &Surrogate, s: &Coalition) -> Result<ProbVec> {
    Ok(softmax(&surrogate.logits(s)?))
}

/// `-Σ t log softmax(z)`, plus the gradient `softmax(z) - t`.
fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = -target
        .iter()
        .zip(logits)
        .map(|(t, z)| if *t == 0.0 { 0.0 } else { t * (z - log_norm) })
        .sum::<f64>();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(z, t)| (z - log_norm).exp() - t)
        .collect();
    (loss, grad)
}

fn mean_loss(surrogate: &Surrogate, samples: &[&TrainSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let (_, logits) = surrogate.forward_cached(&s.coalition.indicator());
            soft_cross_entropy(&logits, &s.target_dist.0).0
        })
        .sum();
    total / samples.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: SurrogateMode,
    pub train_size: usize,
    pub holdout_size: usize,
    /// Mean training cross-entropy before the first update.
    pub initial_loss: f64,
    /// Mean training cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub holdout_loss: f64,
    /// Agreement with the labels' argmax on held-out samples.
    pub holdout_top1_agreement: f64,
    pub fc_checksum_before: Option<String>,
    pub fc_checksum_after: Option<String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Minimises soft-label cross-entropy with minibatch Adam.
///
/// In [`SurrogateMode::Pie`] the linear head is never written; its checksum is
/// recorded before and after training.
pub fn train_surrogate(
    samples: &[TrainSample],
    fc: &FcLayer,
    mode: SurrogateMode,
    config: &PieConfig,
) -> Result<(Surrogate, TrainReport)> {
    let n = samples
        .first()
        .map(|s| s.coalition.n())
        .ok_or_else(|| EacError::InvalidConfig("no training samples".into()))?;
    if samples.len() < 2 {
        return Err(EacError::InvalidConfig("need at least two samples".into()));
    }
    if samples.iter().any(|s| s.target_dist.len() != fc.num_classes()) {
        return Err(EacError::ShapeMismatch("label width differs from class count".into()));
    }
    let (train, holdout) = split_samples(samples, config);
    train_on(&train, &holdout, fc, mode, n, config)
}

/// Trains on an explicit split (no holdout split is performed).
pub fn train_on(
    train: &[&TrainSample],
    holdout: &[&TrainSample],
    fc: &FcLayer,
    mode: SurrogateMode,
    n: usize,
    config: &PieConfig,
) -> Result<(Surrogate, TrainReport)> {
    let mut surrogate = Surrogate::new(mode, fc, n, config);
    let checksum_before = surrogate.fc_checksum();
    let trainable = surrogate.h_layers.len() + usize::from(surrogate.fc_trainable());
    let mut adam: Vec<AdamState> = surrogate
        .layers()
        .take(trainable)
        .map(|l| AdamState {
            m: Grad {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            },
            v: Grad {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            },
        })
        .collect();

    let initial_loss = mean_loss(&surrogate, train);
    let mut shuffle_rng = chacha(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0i32;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let grads = batch_gradients(&surrogate, trainable, batch.iter().map(|&i| train[i]));
            step += 1;
            adam_step(&mut surrogate, &mut adam, &grads, config, step);
        }
        let loss = mean_loss(&surrogate, train);
        if !loss.is_finite() {
            return Err(EacError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(loss);
    }

    let holdout_loss = mean_loss(&surrogate, holdout);
    let agree = holdout
        .iter()
        .filter(|s| {
            let (_, logits) = surrogate.forward_cached(&s.coalition.indicator());
            argmax(&logits) == s.target_dist.argmax()
        })
        .count();
    let report = TrainReport {
        mode,
        train_size: train.len(),
        holdout_size: holdout.len(),
        initial_loss,
        epoch_losses,
        holdout_loss,
        holdout_top1_agreement: agree as f64 / holdout.len().max(1) as f64,
        fc_checksum_before: checksum_before,
        fc_checksum_after: surrogate.fc_checksum(),
    };
    Ok((surrogate, report))
}

/// Mean gradient over a batch for the first `trainable` layers.
fn batch_gradients<'a>(
    surrogate: &Surrogate,
    trainable: usize,
    batch: impl Iterator<Item = &'a TrainSample>,
) -> Vec<Grad> {
    let layers: Vec<&Dense> = surrogate.layers().collect();
    let mut grads: Vec<Grad> = layers[..trainable]
        .iter()
        .map(|l| Grad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect();
    let mut count = 0usize;
    for sample in batch {
        count += 1;
        let (inputs, logits) = surrogate.forward_cached(&sample.coalition.indicator());
        let (_, mut delta) = soft_cross_entropy(&logits, &sample.target_dist.0);
        for k in (0..layers.len()).rev() {
            let layer = layers[k];
            let input = &inputs[k];
            if k < trainable {
                let g = &mut grads[k];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            if surrogate.relu_after(k - 1) {
                for (b, x) in back.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
    }
    let scale = 1.0 / count.max(1) as f64;
    for g in &mut grads {
        g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= scale);
    }
    grads
}

fn adam_step(surrogate: &mut Surrogate, state: &mut [AdamState], grads: &[Grad], config: &PieConfig, step: i32) {
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = config.adam;
    let lr = config.learning_rate;
    let c1 = 1.0 - beta1.powi(step);
    let c2 = 1.0 - beta2.powi(step);
    let update = |params: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..params.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
        }
    };
    let h_count = surrogate.h_layers.len();
    for (k, (st, g)) in state.iter_mut().zip(grads).enumerate() {
        let layer = if k < h_count {
            &mut surrogate.h_layers[k]
        } else {
            surrogate.fc.as_mut().expect("trainable head exists")
        };
        update(&mut layer.weight, &mut st.m.weight, &mut st.v.weight, &g.weight);
        update(&mut layer.bias, &mut st.m.bias, &mut st.v.bias, &g.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Fraction of coalitions where both models pick the same class.
    pub top1_agreement: f64,
    /// Mean over coalitions of the class-averaged absolute probability difference.
    pub mean_abs_prob_gap: f64,
    pub coalitions: usize,
}

/// Compares a candidate against the direct model, coalition by coalition.
pub fn fidelity(
    candidate: &dyn CoalitionModel,
    direct: &dyn CoalitionModel,
    holdout: &[Coalition],
) -> Result<FidelityReport> {
    if holdout.is_empty() {
        return Err(EacError::InvalidConfig("fidelity needs at least one coalition".into()));
    }
    let rows = holdout
        .par_iter()
        .map(|s| {
            let a = candidate.predict(s)?;
            let b = direct.predict(s)?;
            let gap = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            Ok((a.argmax() == b.argmax(), gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let agree = rows.iter().filter(|r| r.0).count();
    Ok(FidelityReport {
        top1_agreement: agree as f64 / rows.len() as f64,
        mean_abs_prob_gap: rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64,
        coalitions: rows.len(),
    })
}
