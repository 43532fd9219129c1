//! Training hyperparameters shared by all phases.

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};

/// Hyperparameters for pre-training, meta-learning, and adaptation.
///
/// The schedule fields (`pretrain_steps`, `meta_iters`, ...) are desk-scale
/// budgets sized for a single CPU core; the learning rates and batch shapes
/// are the experiment's fixed operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Support/query size N per episode (N-shot adaptation).
    pub n_shots: usize,
    /// Episodes per meta-update.
    pub meta_batch_size: usize,
    /// Inner-loop (fast adaptation) SGD learning rate α.
    pub inner_lr: f64,
    /// Outer-loop Adam learning rate β.
    pub meta_lr: f64,
    /// Adaptation base learning rate.
    pub adapt_lr: f64,
    /// Exponential decay factor per adaptation step.
    pub adapt_lr_decay: f64,
    /// Inner-loop gradient steps per episode.
    pub inner_steps: usize,
    /// Differentiate through the inner trajectory (else first-order).
    pub second_order: bool,
    /// Loss weighting and switches.
    pub loss: LossWeights,
    /// Pre-training Adam learning rate.
    pub pretrain_lr: f64,
    /// Pre-training step budget.
    pub pretrain_steps: usize,
    /// Pre-training minibatch size.
    pub pretrain_batch: usize,
    /// Dropout probability during pre-training.
    pub dropout: f64,
    /// Meta-training iteration budget.
    pub meta_iters: usize,
    /// Meta-validation cadence (iterations).
    pub val_every: usize,
    /// Adaptation snapshot step marks.
    pub snapshots: Vec<usize>,
    /// Root seed; all randomness derives from it through named children.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_shots: 5,
            meta_batch_size: 10,
            inner_lr: 0.001,
            meta_lr: 0.0001,
            adapt_lr: 0.001,
            adapt_lr_decay: 0.9998,
            inner_steps: 3,
            second_order: true,
            loss: LossWeights::default(),
            pretrain_lr: 1e-3,
            pretrain_steps: 2000,
            pretrain_batch: 16,
            dropout: 0.1,
            meta_iters: 500,
            val_every: 25,
            snapshots: vec![10, 50, 100, 200, 500, 1000],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inner_lr", self.inner_lr),
            ("meta_lr", self.meta_lr),
            ("adapt_lr", self.adapt_lr),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.adapt_lr_decay > 0.0 && self.adapt_lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "adapt_lr_decay must lie in (0, 1], got {}",
                self.adapt_lr_decay
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be ≥ 1".into()));
        }
        if self.n_shots == 0 {
            return Err(Error::Config("n_shots must be ≥ 1".into()));
        }
        if self.meta_batch_size == 0 {
            return Err(Error::Config("meta_batch_size must be ≥ 1".into()));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::Config("pretrain_batch must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be ≥ 1".into()));
        }
        if self.snapshots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "snapshot step marks must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Adaptation learning rate at step t (0-based schedule, applied before
    /// the t-th update): lr·decayᵗ.
    pub fn adapt_lr_at(&self, step: usize) -> f64 {
        self.adapt_lr * self.adapt_lr_decay.powi(step as i32)
    }
}
