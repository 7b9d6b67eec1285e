//! Loss, optimisers, and the single training step.

mod data;

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{make_toy_dataset, make_toy_splits, sample_batch, sample_example, synth_track, Batch, BatchOptions, Dataset, Example, Split, StemSet};

use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor};
use crate::params::{Ctx, Mode, ParamStore};
use crate::scalar::Real;

/// Mean of `(est - target)^2` over all elements.
pub fn mse_loss<S: Real>(est: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if est.shape() != target.shape() {
        return Err(dim_err("mse_loss", format!("{:?} vs {:?}", est.shape(), target.shape())));
    }
    let s: S = est.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / S::from_usize(est.numel()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
    /// Gradient descent with heavy-ball momentum.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Momentum coefficient for [`OptimizerKind::Sgd`].
    pub momentum: f64,
    pub seed: u64,
    pub segment_seconds: f64,
    /// Validation loss cadence in steps.
    pub validate_every: usize,
    /// Checkpoint cadence in steps.
    pub checkpoint_every: usize,
    pub random_gain: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
            seed: 0,
            segment_seconds: 0.75,
            validate_every: 100,
            checkpoint_every: 500,
            random_gain: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.segment_seconds > 0.0) || self.validate_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, segment_seconds, validate_every and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self, sample_rate: u32) -> usize {
        num_traits::Float::round(self.segment_seconds * sample_rate as f64) as usize
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            random_gain: self.random_gain,
            aligned_track: None,
        }
    }

    /// Sampling stream of step `step` (0-based); stream 0 is the validation batch.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step + 1);
        rng
    }

    pub fn validation_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        rng
    }
}

/// Optimiser hyperparameters and per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub lr: S,
    pub momentum: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    /// Updates applied so far.
    pub step: u64,
    /// First moments (Adam) or momentum buffers (SGD).
    pub m: Vec<Tensor<S>>,
    /// Second moments (Adam only; empty tensors are kept for SGD).
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, store: &ParamStore<S>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect::<Vec<_>>();
        Self {
            kind,
            lr: S::lit(lr),
            momentum: S::lit(momentum),
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(cfg: &TrainConfig, store: &ParamStore<S>) -> Self {
        Self::new(cfg.optimizer, cfg.learning_rate, cfg.momentum, store)
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = store.param_mut(crate::params::ParamId(i));
            let m = self.m[i].data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let v = self.v[i].data_mut();
                    for j in 0..p.numel() {
                        let gj = g.as_ref().map_or(S::zero(), |g| g.data()[j]);
                        m[j] = b1 * m[j] + (S::one() - b1) * gj;
                        v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..p.numel() {
                        let gj = g.as_ref().map_or(S::zero(), |g| g.data()[j]);
                        m[j] = self.momentum * m[j] + gj;
                        p.data_mut()[j] -= self.lr * m[j];
                    }
                }
            }
        }
    }
}

/// Loss and gradients of one batch without touching the model.
pub fn loss_and_grads<S: Real>(model: &Model<S>, batch: &Batch<S>) -> Result<(S, Vec<Option<Tensor<S>>>, Graph<S>)> {
    let mut g = Graph::new();
    let x = g.constant(batch.mixture.clone());
    let target = g.constant(batch.target.clone());
    let mut ctx = Ctx::new(&mut g, &model.store, Mode::Train);
    let trace = model.net.forward_graph(&mut ctx, x, &batch.conditions)?;
    let loss = g.mse(trace.output, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(loss);
    let per_param = model.store.collect_grads(&g, &grads);
    Ok((value, per_param, g))
}

/// Forward, loss, backward and update on one batch. Returns the loss before
/// the update. On a non-finite loss the model is left untouched.
pub fn train_step<S: Real>(model: &mut Model<S>, opt: &mut Optimizer<S>, batch: &Batch<S>) -> Result<S> {
    let (loss, grads, graph) = loss_and_grads(model, batch)?;
    opt.update(&mut model.store, &grads);
    model.update_running_stats(&graph);
    Ok(loss)
}

/// Eval-mode loss on a fixed batch.
pub fn validation_loss<S: Real>(model: &Model<S>, batch: &Batch<S>) -> Result<S> {
    let est = model.forward_batch(&batch.mixture, &batch.conditions)?;
    mse_loss(&est, &batch.target)
}

#[cfg(test)]
mod tests;
