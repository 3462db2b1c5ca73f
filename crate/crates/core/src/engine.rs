//! Source training and the online test-time adaptation loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchStream, ShapeDataset};
use crate::error::{Error, Result};
use crate::lifting::{LiftedViT, LiftingParams};
use crate::losses::default_e0;
use crate::math;
use crate::optim::{self, DualHyper, Objective, PassCounter};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{Backbone, ViTConfig};

/// Supervised training settings for the source model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            final_lr_fraction: 0.05,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Clean accuracy on the held-out split, when one was given.
    pub test_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSource {
    pub backbone: Backbone,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose loss went non-finite; `backbone` then holds the weights
    /// from the end of the previous epoch.
    pub diverged_at: Option<usize>,
    pub test_accuracy: Option<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&mut Tensor]) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - powi(Self::B1, self.t);
        let c2 = 1.0 - powi(Self::B2, self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = weight_decay > 0.0 && p.rank() > 1;
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * gj;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * gj * gj;
                let update = (m[j] / c1) / (math::sqrt(v[j] / c2) + Self::EPS);
                if decay {
                    *w -= lr * weight_decay * *w;
                }
                *w -= lr * update;
            }
        }
    }
}

fn powi(x: f64, n: i32) -> f64 {
    (0..n).fold(1.0, |acc, _| acc * x)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = alloc::vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Index { index: l, len: classes });
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

fn cosine_lr(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return tc.lr;
    }
    let progress = step as f64 / (total - 1) as f64;
    let lo = tc.lr * tc.final_lr_fraction;
    lo + 0.5 * (tc.lr - lo) * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// Fraction of correct argmax predictions.
pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    correct_count(logits, labels) as f64 / labels.len() as f64
}

fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Clean accuracy of the source model on a dataset, evaluated in chunks.
pub fn dataset_accuracy(backbone: &Backbone, data: &ShapeDataset, chunk: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let logits = backbone.predict(&data.gather(c)?)?;
        let labels: Vec<usize> = c.iter().map(|&i| data.labels[i]).collect();
        correct += correct_count(&logits, &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Cross-entropy training of the full backbone with Adam and cosine decay.
pub fn train_source(
    cfg: ViTConfig,
    train: &ShapeDataset,
    test: Option<&ShapeDataset>,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedSource> {
    if tc.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut backbone = Backbone::init(cfg, tc.seed)?;
    let mut adam = Adam::new(&backbone.tensors_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(7);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let mut step = 0;
    let mut logs = Vec::with_capacity(tc.epochs);
    let mut last_good = backbone.clone();
    let mut diverged_at = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = tc.lr;
        for chunk in order.chunks(tc.batch_size) {
            let images = train.gather(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let vars = backbone.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = backbone.forward(&mut tape, &vars, x)?;
            let lp = tape.log_softmax(out.logits)?;
            let target = tape.constant(one_hot(&labels, cfg.num_classes)?);
            let picked = tape.mul(lp, target)?;
            let total_lp = tape.sum(picked)?;
            let loss = tape.scale(total_lp, -1.0 / chunk.len() as f64)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                diverged_at = Some(epoch);
                break;
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.all().into_iter().map(|v| tape.grad(v)).collect();
            correct += correct_count(tape.value(out.logits), &labels);
            loss_sum += value * chunk.len() as f64;
            lr = cosine_lr(tc, step, total);
            adam.step(backbone.tensors_mut(), &grads, lr, tc.weight_decay);
            step += 1;
        }
        if diverged_at.is_some() {
            backbone = last_good.clone();
            break;
        }
        let test_accuracy = match test {
            Some(t) => Some(dataset_accuracy(&backbone, t, 256)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
            lr,
        };
        on_epoch(&log);
        logs.push(log);
        last_good = backbone.clone();
    }
    let test_accuracy = match (logs.last(), test) {
        (Some(l), _) => l.test_accuracy,
        (None, Some(t)) => Some(dataset_accuracy(&backbone, t, 256)?),
        (None, None) => None,
    };
    Ok(TrainedSource {
        backbone,
        epochs: logs,
        diverged_at,
        test_accuracy,
    })
}

/// Adaptation variants, from no adaptation to the full method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdaptMode {
    /// The source model, never updated.
    Frozen,
    /// Entropy minimization on the class-token normalizations only.
    TentLike,
    /// Dual-path lifting trained on the reliable entropy alone.
    DpalNoSimloss,
    /// Dual-path lifting with the balanced similarity loss.
    DpalFull,
    /// As [`AdaptMode::DpalFull`] but with SAM of the given radius on the prediction path.
    DpalSmoothPred(f64),
}

impl AdaptMode {
    pub fn name(&self) -> String {
        match self {
            AdaptMode::Frozen => "frozen".into(),
            AdaptMode::TentLike => "tent_like".into(),
            AdaptMode::DpalNoSimloss => "dpal_no_simloss".into(),
            AdaptMode::DpalFull => "dpal_full".into(),
            AdaptMode::DpalSmoothPred(r) => format!("dpal_smooth_pred({r})"),
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "frozen" => AdaptMode::Frozen,
            "tent_like" => AdaptMode::TentLike,
            "dpal_no_simloss" => AdaptMode::DpalNoSimloss,
            "dpal_full" => AdaptMode::DpalFull,
            _ => {
                let rho = s
                    .strip_prefix("dpal_smooth_pred(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|r| r.trim().parse::<f64>().ok())
                    .filter(|r| *r >= 0.0 && r.is_finite())
                    .ok_or_else(|| Error::contract(format!("unknown adaptation mode {s:?}")))?;
                AdaptMode::DpalSmoothPred(rho)
            }
        })
    }
}

/// Adaptation hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub lr: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub e0: f64,
    /// Hidden width of the prediction networks.
    pub hidden: usize,
}

impl AdaptConfig {
    /// Learning rate 1e-2, SAM radius 0.05, batch 64, `E_0 = 0.4·ln C`, hidden width `d/2`.
    pub fn defaults(cfg: &ViTConfig) -> Self {
        Self {
            lr: 1e-2,
            rho: 0.05,
            batch_size: 64,
            e0: default_e0(cfg.num_classes),
            hidden: (cfg.dim / 2).max(1),
        }
    }
}

/// Counters of an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptState {
    pub step: u64,
    pub mode: AdaptMode,
    pub config: AdaptConfig,
    pub correct: usize,
    pub seen: usize,
    pub passes: PassCounter,
}

impl AdaptState {
    pub fn rolling_accuracy(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.correct as f64 / self.seen as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRecord {
    pub t: u64,
    pub loss: f64,
    pub entropy: f64,
    pub similarity: f64,
    pub lambda: f64,
    pub selected: usize,
    pub batch_size: usize,
    pub correct: usize,
    pub eps_norm: f64,
    pub skipped: bool,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.batch_size.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub mode: AdaptMode,
    pub config: AdaptConfig,
    pub seed: u64,
    pub records: Vec<BatchRecord>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub backbone_checksum: u64,
}

impl RunReport {
    fn mean_of(&self, f: impl Fn(&BatchRecord) -> f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(f).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_entropy(&self) -> f64 {
        self.mean_of(|r| r.entropy)
    }

    pub fn mean_similarity(&self) -> f64 {
        self.mean_of(|r| r.similarity)
    }

    pub fn mean_lambda(&self) -> f64 {
        self.mean_of(|r| r.lambda)
    }
}

/// A lifted model together with its adaptation state and the checkpoint it
/// resets to.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub model: LiftedViT,
    pub state: AdaptState,
    checkpoint: Backbone,
    seed: u64,
}

impl Adapter {
    pub fn new(backbone: Backbone, mode: AdaptMode, config: AdaptConfig, seed: u64) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.rho >= 0.0) || config.batch_size == 0 || !(config.e0 > 0.0) {
            return Err(Error::contract("invalid adaptation config"));
        }
        let lifting = Self::fresh_lifting(&backbone, mode, &config, seed)?;
        let (smooth, nonsmooth) = optim::partition(&lifting);
        optim::validate_partition(&[&smooth, &nonsmooth], &lifting.ids())?;
        Ok(Self {
            model: LiftedViT {
                backbone: backbone.clone(),
                lifting,
            },
            state: AdaptState {
                step: 0,
                mode,
                config,
                correct: 0,
                seen: 0,
                passes: PassCounter::default(),
            },
            checkpoint: backbone,
            seed,
        })
    }

    fn fresh_lifting(backbone: &Backbone, mode: AdaptMode, config: &AdaptConfig, seed: u64) -> Result<LiftingParams> {
        match mode {
            AdaptMode::Frozen | AdaptMode::TentLike => LiftingParams::null(backbone, config.hidden),
            _ => LiftingParams::init(backbone, config.hidden, seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Reloads the backbone, re-initializes the lifting from the seed and zeroes the counters.
    pub fn reset(&mut self) -> Result<()> {
        self.model.backbone = self.checkpoint.clone();
        self.model.lifting = Self::fresh_lifting(&self.checkpoint, self.state.mode, &self.state.config, self.seed)?;
        self.state.step = 0;
        self.state.correct = 0;
        self.state.seen = 0;
        self.state.passes = PassCounter::default();
        Ok(())
    }

    /// Predictions of the current parameters, without updating.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        match self.state.mode {
            AdaptMode::Frozen => self.model.backbone.predict(images),
            _ => Ok(self.model.infer(images)?.logits),
        }
    }

    fn objective(&self) -> Objective {
        Objective {
            e0: self.state.config.e0,
            similarity: !matches!(self.state.mode, AdaptMode::DpalNoSimloss | AdaptMode::TentLike),
        }
    }

    /// Predicts `images` with the current parameters, then adapts on them.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<BatchRecord> {
        let c = self.state.config;
        let report = match self.state.mode {
            AdaptMode::Frozen => {
                let logits = self.model.backbone.predict(images)?;
                optim::StepReport {
                    loss: 0.0,
                    entropy: 0.0,
                    similarity: 0.0,
                    lambda: 0.0,
                    selected: 0,
                    grad_norm: 0.0,
                    eps_norm: 0.0,
                    skipped: true,
                    logits,
                }
            }
            AdaptMode::TentLike => {
                let (smooth, _) = optim::partition(&self.model.lifting);
                let obj = self.objective();
                optim::single_path_step(&mut self.model, images, &smooth, c.lr, &obj, &mut self.state.passes)?
            }
            AdaptMode::DpalNoSimloss | AdaptMode::DpalFull | AdaptMode::DpalSmoothPred(_) => {
                let rho_pred = match self.state.mode {
                    AdaptMode::DpalSmoothPred(r) => r,
                    _ => 0.0,
                };
                let hyper = DualHyper {
                    lr_smooth: c.lr,
                    lr_nonsmooth: c.lr,
                    rho_smooth: c.rho,
                    rho_pred,
                    objective: self.objective(),
                };
                optim::dual_path_step(&mut self.model, images, &hyper, &mut self.state.passes)?
            }
        };
        let correct = correct_count(&report.logits, labels);
        self.state.step += 1;
        self.state.correct += correct;
        self.state.seen += labels.len();
        Ok(BatchRecord {
            t: self.state.step,
            loss: report.loss,
            entropy: report.entropy,
            similarity: report.similarity,
            lambda: report.lambda,
            selected: report.selected,
            batch_size: labels.len(),
            correct,
            eps_norm: report.eps_norm,
            skipped: report.skipped,
        })
    }
}

/// Runs the whole stream once in order; accuracy counts pre-update predictions.
pub fn adapt_online(adapter: &mut Adapter, stream: &BatchStream) -> Result<RunReport> {
    adapt_online_with(adapter, stream, |_| {})
}

pub fn adapt_online_with(
    adapter: &mut Adapter,
    stream: &BatchStream,
    mut on_batch: impl FnMut(&BatchRecord),
) -> Result<RunReport> {
    let mut records = Vec::with_capacity(stream.len());
    let (mut correct, mut total) = (0, 0);
    for b in &stream.batches {
        let r = adapter.step(&b.images, &b.labels)?;
        correct += r.correct;
        total += r.batch_size;
        on_batch(&r);
        records.push(r);
    }
    Ok(RunReport {
        mode: adapter.state.mode,
        config: adapter.state.config,
        seed: adapter.seed,
        records,
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        backbone_checksum: adapter.model.backbone.checksum(),
    })
}

/// Accuracy of the unadapted source model over a stream.
pub fn evaluate_frozen(backbone: &Backbone, stream: &BatchStream) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for b in &stream.batches {
        correct += correct_count(&backbone.predict(&b.images)?, &b.labels);
        total += b.labels.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Final adapted accuracy for each SAM radius applied to the prediction path.
pub fn rho_sweep(
    backbone: &Backbone,
    stream: &BatchStream,
    rhos: &[f64],
    config: AdaptConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    rhos.iter()
        .map(|&rho| {
            let mode = if rho == 0.0 {
                AdaptMode::DpalFull
            } else {
                AdaptMode::DpalSmoothPred(rho)
            };
            let mut adapter = Adapter::new(backbone.clone(), mode, config, seed)?;
            Ok((rho, adapt_online(&mut adapter, stream)?.accuracy))
        })
        .collect()
}

#[cfg(test)]
#[path = "engine_tests.rs"]
mod tests;
