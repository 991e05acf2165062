//! Training for the k-head model.
//!
//! Each minibatch trains one head chosen uniformly at random: the loss of
//! head `i` is the cross-entropy of predicting each target shifted by `i`.
//! Averaged over the draw this is an unbiased estimate of the mean of all
//! head losses, at the memory cost of a single head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tiny::TinyBlockModel;
use super::ModelError;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    /// Zero-based head index (0 = base next-token head).
    pub sampled_head: usize,
}

impl TrainBatch {
    /// Batch whose head is drawn uniformly from `0..k_heads`.
    pub fn sample<R: Rng>(inputs: Vec<Vec<TokenId>>, targets: Vec<Vec<TokenId>>, k_heads: usize, rng: &mut R) -> Self {
        let sampled_head = rng.gen_range(0..k_heads);
        Self { inputs, targets, sampled_head }
    }

    pub fn pairs(&self) -> Vec<(&[TokenId], &[TokenId])> {
        self.inputs.iter().zip(&self.targets).map(|(x, y)| (x.as_slice(), y.as_slice())).collect()
    }
}

fn check_batch(batch: &TrainBatch) -> Result<(), ModelError> {
    if batch.inputs.is_empty() || batch.inputs.len() != batch.targets.len() {
        return Err(ModelError::Invalid("batch must be non-empty with one target per input".into()));
    }
    Ok(())
}

/// One plain SGD step on the sampled head's loss. Frozen partitions are
/// left untouched. Returns the sub-loss before the update; a non-finite loss
/// is reported as an error and nothing changes.
pub fn train_step(model: &mut TinyBlockModel, batch: &TrainBatch, learning_rate: f64) -> Result<f64, ModelError> {
    check_batch(batch)?;
    let mask = model.freeze_mask();
    let (loss, mut grad) = model.loss_and_grad_masked(&batch.pairs(), batch.sampled_head, mask)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFiniteLoss);
    }
    grad.iter_mut().for_each(|g| *g *= learning_rate);
    model.apply_update(&grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Same contract as [`train_step`], with Adam moment estimates.
    pub fn step(&mut self, model: &mut TinyBlockModel, batch: &TrainBatch) -> Result<f64, ModelError> {
        check_batch(batch)?;
        let mask = model.freeze_mask();
        let (loss, grad) = model.loss_and_grad_masked(&batch.pairs(), batch.sampled_head, mask)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteLoss);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            update[i] = self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
        model.apply_update(&update);
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, learning_rate: 0.05, optimizer: OptimizerKind::Sgd, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub heads: Vec<usize>,
}

impl TrainLog {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Minibatch training over `pairs` (targets already carry any EOS). Batches
/// and heads are drawn from a generator seeded with `opts.seed`.
pub fn train(
    model: &mut TinyBlockModel,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    opts: &TrainOptions,
) -> Result<TrainLog, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam =
        (opts.optimizer == OptimizerKind::Adam).then(|| Adam::new(opts.learning_rate, model.num_parameters()));
    let k = model.config().k_heads;
    let mut log = TrainLog { losses: Vec::with_capacity(opts.steps), heads: Vec::with_capacity(opts.steps) };
    for _ in 0..opts.steps {
        let (inputs, targets) = (0..opts.batch_size).map(|_| pairs[rng.gen_range(0..pairs.len())].clone()).unzip();
        let batch = TrainBatch::sample(inputs, targets, k, &mut rng);
        let loss = match adam.as_mut() {
            Some(a) => a.step(model, &batch)?,
            None => train_step(model, &batch, opts.learning_rate)?,
        };
        log.losses.push(loss);
        log.heads.push(batch.sampled_head);
    }
    Ok(log)
}
