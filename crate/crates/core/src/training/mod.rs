//! Objective, optimizer and training loop.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_VERSION};
pub use optim::{adamw_step, clip_gradients, LossScaler, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{evaluate_loss, EpochStats, StepLog, TrainData, Trainer};

use alloc::format;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tape::{Precision, Tape, Var};

/// How token losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// Summed NLL divided by the number of target tokens.
    #[default]
    Mean,
    /// Summed NLL.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Micro-batches per optimizer update.
    pub accumulation_steps: usize,
    pub clip_norm: f64,
    /// Weight of the squared-parameter penalty in the objective.
    pub lambda: f64,
    pub loss_scaling: bool,
    /// Initial loss scale when scaling is on.
    pub loss_scale: f64,
    pub seed: u64,
    pub loss_form: LossForm,
    pub precision: Precision,
    /// Longest token sequence per example, begin and end markers included.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            batch_size: 32,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            accumulation_steps: 1,
            clip_norm: 1.0,
            lambda: 1e-4,
            loss_scaling: true,
            loss_scale: 1024.0,
            seed: 0,
            loss_form: LossForm::Mean,
            precision: Precision::Wide,
            max_len: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if !(self.loss_scale > 0.0) || !self.loss_scale.is_finite() {
            return bad("loss_scale");
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("weight_decay and lambda must be non-negative".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Loss scale in effect at the start of training.
    pub fn initial_scale(&self) -> f64 {
        if self.loss_scaling {
            self.loss_scale
        } else {
            1.0
        }
    }
}

/// Objective for one batch: token NLL (mean or summed) plus
/// `lambda·Σ w²` over the penalized tensors `l2`.
///
/// `logits[b]` is the `[T×V]` output for row `b` of `batch`.
pub fn compute_loss(
    tape: &mut Tape,
    logits: &[Var],
    batch: &Batch,
    l2: &[Var],
    lambda: f64,
    form: LossForm,
) -> Result<Var> {
    let tokens = batch.token_count();
    if tokens == 0 {
        return Err(Error::AllPadded);
    }
    let nll = summed_nll(tape, logits, batch)?;
    let w = match form {
        LossForm::Mean => 1.0 / tokens as f64,
        LossForm::Sum => 1.0,
    };
    weighted_objective(tape, nll, w, l2, lambda)
}

/// Σ over rows of the masked cross-entropy.
pub(crate) fn summed_nll(tape: &mut Tape, logits: &[Var], batch: &Batch) -> Result<Var> {
    if logits.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit blocks for a batch of {}",
            logits.len(),
            batch.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (row, &l) in logits.iter().enumerate() {
        let targets = batch.masked_targets(row);
        let nll = tape.cross_entropy(l, &targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    total.ok_or(Error::AllPadded)
}

/// `w_nll·nll + lambda·Σ‖t‖²`.
fn weighted_objective(tape: &mut Tape, nll: Var, w_nll: f64, l2: &[Var], lambda: f64) -> Result<Var> {
    let data = tape.scale(nll, w_nll)?;
    penalized(tape, data, l2, lambda)
}

pub(crate) fn penalized(tape: &mut Tape, data: Var, l2: &[Var], lambda_weight: f64) -> Result<Var> {
    if lambda_weight == 0.0 || l2.is_empty() {
        return Ok(data);
    }
    let mut acc = data;
    let mut sq: Option<Var> = None;
    for &p in l2 {
        let s = tape.sum_squares(p)?;
        sq = Some(match sq {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    if let Some(sq) = sq {
        let reg = tape.scale(sq, lambda_weight)?;
        acc = tape.add(acc, reg)?;
    }
    Ok(acc)
}
