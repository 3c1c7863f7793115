//! Mini-batch Adam training, evaluation and repeated experiments.
//!
//! Per-sample work inside a batch runs on the rayon pool when the `parallel`
//! feature is enabled; results are always reduced in sample order, so both
//! execution modes produce bit-identical gradients.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agl::{LearnedGraph, GraphDocument};
use crate::data::{Split, SessionSample};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{Metrics, MetricsReport};
use crate::model::{bce_loss, Model, ModelConfig};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Head dropout rate.
    pub dropout: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 4,
            max_epochs: 20,
            patience: 10,
            dropout: 0.0,
            repetitions: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if !(0.0..=0.8).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout must lie in [0, 0.8], got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Param("Adam moments must lie in [0, 1) with positive epsilon".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update; nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    params.name(crate::params::ParamId(i))
                )));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.tensors_mut()[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (&gj, w)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// How per-sample work inside a batch is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Uses the rayon pool; identical to `Sequential` without the
    /// `parallel` feature.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Order-preserving map over `items`.
pub fn map_samples<T: Sync, R: Send>(items: &[T], mode: ExecMode, f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// SplitMix64 finalizer over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Mean loss and parameter gradients over `batch`; sample `i` draws its
/// Gumbel noise and dropout from `seeds[i]`.
pub fn batch_gradient(
    model: &Model,
    batch: &[&SessionSample],
    seeds: &[u64],
    dropout: f64,
    mode: ExecMode,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(Error::shape("batch", &[batch.len()], &[seeds.len()]));
    }
    let per_sample = map_samples(batch, mode, |i, sample| -> Result<(f64, Vec<Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let perturbation = model.sample_perturbation(&mut rng, dropout);
        let tape = Tape::new();
        let b = model.params().bind(&tape);
        let out = model.forward(&tape, &b, &sample.sequence, &perturbation)?;
        let loss = bce_loss(&[out.prob], &[sample.label])?;
        let grads = tape.backward(loss)?;
        Ok((loss.item(), b.vars().iter().map(|v| grads.wrt(*v)).collect()))
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut total: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for result in per_sample {
        let (loss, grads) = result?;
        total_loss += loss;
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    total.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
    Ok((total_loss * scale, total))
}

/// Deterministic predictions for every sample, in order.
pub fn predict_all(model: &Model, samples: &[SessionSample], mode: ExecMode) -> Result<Vec<(f64, LearnedGraph)>> {
    map_samples(samples, mode, |_, s| {
        model.predict(&s.sequence).map(|(p, g)| (p.prob_tsr, g))
    })
    .into_iter()
    .collect()
}

/// Mean clamped cross-entropy of deterministic predictions.
pub fn mean_loss(model: &Model, samples: &[SessionSample], mode: ExecMode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("cannot compute a loss over no samples".into()));
    }
    let probs = map_samples(samples, mode, |_, s| model.predict(&s.sequence).map(|(p, _)| p.prob_tsr));
    let mut total = 0.0;
    for (p, s) in probs.into_iter().zip(samples) {
        let p = p?.clamp(1e-7, 1.0 - 1e-7);
        total -= if s.label == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / samples.len() as f64)
}

pub fn evaluate(model: &Model, samples: &[SessionSample], mode: ExecMode) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on no samples".into()));
    }
    let preds: Vec<u8> = predict_all(model, samples, mode)?
        .into_iter()
        .map(|(p, _)| u8::from(p >= 0.5))
        .collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(Metrics::from_pairs(&preds, &labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen, including the
    /// initialization.
    pub model: Model,
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Wall-clock training time.
    pub elapsed_secs: f64,
}

pub fn train(mut model: Model, train_set: &[SessionSample], val_set: &[SessionSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(&mut model, train_set, val_set, cfg, ExecMode::default())
}

pub fn train_with(
    model: &mut Model,
    train_set: &[SessionSample],
    val_set: &[SessionSample],
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    let mut adam = Adam::new(cfg, model.params());
    let initial_val_loss = mean_loss(model, val_set, mode)?;
    let mut best = (0, initial_val_loss, model.params().clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64])));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SessionSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|pos| derive_seed(&[cfg.seed, epoch as u64, bi as u64, pos as u64]))
                .collect();
            let (loss, grads) = batch_gradient(model, &batch, &seeds, cfg.dropout, mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {}", bi + 1)));
            }
            adam.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {}", bi + 1)),
                other => other,
            })?;
            model.clamp_scalars();
            epoch_loss += loss * batch.len() as f64;
        }
        let val_loss = mean_loss(model, val_set, mode)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, params) = best;
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model: model.clone(),
        initial_val_loss,
        history,
        best_epoch,
        best_val_loss,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct RepetitionOutcome {
    pub report: MetricsReport,
    pub outcomes: Vec<TrainOutcome>,
}

/// Trains `cfg.repetitions` models; repetition `r` uses seed `base + r` for
/// both initialization and training.
pub fn run_repetitions(model_cfg: &ModelConfig, split: &Split, cfg: &TrainConfig, mode: ExecMode) -> Result<RepetitionOutcome> {
    let reps: Vec<u64> = (0..cfg.repetitions as u64).collect();
    let results = map_samples(&reps, mode, |_, &r| -> Result<(Metrics, TrainOutcome)> {
        let mut model = Model::new(ModelConfig {
            seed: model_cfg.seed + r,
            ..model_cfg.clone()
        })?;
        let run_cfg = TrainConfig {
            seed: cfg.seed + r,
            ..cfg.clone()
        };
        let outcome = train_with(&mut model, &split.train, &split.val, &run_cfg, mode)?;
        let metrics = evaluate(&outcome.model, &split.test, mode)?;
        Ok((metrics, outcome))
    });
    let mut runs = Vec::new();
    let mut outcomes = Vec::new();
    for r in results {
        let (m, o) = r?;
        runs.push(m);
        outcomes.push(o);
    }
    Ok(RepetitionOutcome {
        report: MetricsReport::from_runs(runs),
        outcomes,
    })
}

/// Learned graph of one session as a JSON-ready document.
pub fn inspect_graph(model: &Model, sample: &SessionSample) -> Result<GraphDocument> {
    Ok(model.predict(&sample.sequence)?.1.to_document())
}

/// Per-row top-k of the mean learned adjacency over `graphs`.
pub fn consensus_mask(graphs: &[LearnedGraph], k: usize) -> Result<Tensor> {
    combine(graphs, k, |g| &g.adjacency)
}

/// Per-row top-k of how often each edge was selected over `graphs`.
pub fn mask_consensus(graphs: &[LearnedGraph], k: usize) -> Result<Tensor> {
    combine(graphs, k, |g| &g.mask)
}

fn combine(graphs: &[LearnedGraph], k: usize, field: impl Fn(&LearnedGraph) -> &Tensor) -> Result<Tensor> {
    let first = graphs.first().ok_or_else(|| Error::Config("no graphs to combine".into()))?;
    let p = first.nodes();
    let mut mean = vec![0.0; p * p];
    for g in graphs {
        if g.nodes() != p {
            return Err(Error::shape("consensus", &[p], &[g.nodes()]));
        }
        mean.iter_mut().zip(field(g).data()).for_each(|(m, a)| *m += a / graphs.len() as f64);
    }
    Tensor::new(vec![p, p], crate::diff::topk_rows(&mean, p, k))
}

/// Fraction of the undirected edges of `mask ∪ maskᵀ` (self-loops excluded)
/// present in `truth`.
pub fn edge_precision(mask: &Tensor, truth: &Tensor) -> Result<f64> {
    if mask.shape() != truth.shape() {
        return Err(Error::shape("edge_precision", mask.shape(), truth.shape()));
    }
    let p = mask.shape()[0];
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..p {
        for j in i + 1..p {
            if mask.at(i, j) != 0.0 || mask.at(j, i) != 0.0 {
                total += 1;
                if truth.at(i, j) != 0.0 {
                    hits += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
