use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::checkpoint::{ModelCheckpoint, CHECKPOINT_VERSION};
use super::optim::{adamw_step, clip_gradients, LossScaler, OptimizerState};
use super::{penalized, summed_nll, LossForm, TrainConfig};
use crate::data::{batch_examples, Batch, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::kernels::round_half;
use crate::model::{ModelParams, Net, VisualInput};
use crate::rng::Rng;
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;
use crate::vision::VisualFeatureSet;

/// Everything an epoch reads.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub examples: Vec<Example>,
    pub features: BTreeMap<String, VisualFeatureSet>,
    pub vocab: Vocabulary,
}

/// One optimizer step (applied or skipped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// Global step after this group; unchanged when skipped.
    pub step: u64,
    /// Mean NLL per target token over the group.
    pub loss: f64,
    /// Global gradient norm before clipping; NaN when skipped.
    pub grad_norm: f64,
    /// Scale used for this group.
    pub loss_scale: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Epoch number, counting from 1.
    pub epoch: usize,
    /// Mean NLL per target token over every group of the epoch.
    pub mean_loss: f64,
    pub grad_norm_min: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub updates: usize,
    pub skipped: usize,
    pub steps: Vec<StepLog>,
}

/// Gradients of one accumulation group, still multiplied by the loss scale.
struct GroupGrads {
    grads: Vec<Tensor>,
    nll: f64,
    tokens: usize,
    overflow: bool,
}

/// Training state: parameters, optimizer, loss scale and shuffling stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub scaler: LossScaler,
    rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(model: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.max_len > model.config().max_text_len {
            return Err(Error::Config(format!(
                "max_len {} exceeds the model's {} text positions",
                config.max_len,
                model.config().max_text_len
            )));
        }
        Ok(Self {
            optimizer: OptimizerState::new(model.store()),
            scaler: LossScaler::new(config.initial_scale()),
            rng: Rng::new(config.seed),
            model,
            config,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// This epoch's batches: examples shuffled by the trainer's stream.
    pub fn epoch_batches(&mut self, data: &TrainData) -> Result<Vec<Batch>> {
        let mut examples = data.examples.clone();
        self.rng.shuffle(&mut examples);
        batch_examples(&examples, &data.features, &data.vocab, self.config.batch_size, self.config.max_len)
    }

    /// Shuffles, batches, and runs one update per group of
    /// `accumulation_steps` batches.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<EpochStats> {
        if data.examples.is_empty() {
            return Err(Error::Corpus("no training examples".into()));
        }
        let batches = self.epoch_batches(data)?;
        let mut steps = Vec::new();
        let (mut nll, mut tokens) = (0.0, 0usize);
        for group in batches.chunks(self.config.accumulation_steps) {
            let group_tokens: usize = group.iter().map(Batch::token_count).sum();
            let log = self.train_group(group)?;
            nll += log.loss * group_tokens as f64;
            tokens += group_tokens;
            steps.push(log);
        }
        self.epoch += 1;
        let norms: Vec<f64> = steps.iter().filter(|s| !s.skipped).map(|s| s.grad_norm).collect();
        let (min, max, mean) = if norms.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                norms.iter().copied().fold(f64::INFINITY, f64::min),
                norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                norms.iter().sum::<f64>() / norms.len() as f64,
            )
        };
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: nll / tokens as f64,
            grad_norm_min: min,
            grad_norm_mean: mean,
            grad_norm_max: max,
            updates: norms.len(),
            skipped: steps.len() - norms.len(),
            steps,
        })
    }

    /// One optimizer update from a group of micro-batches.
    pub fn train_group(&mut self, group: &[Batch]) -> Result<StepLog> {
        let scale = self.scaler.scale();
        let g = self.group_gradients(group, scale)?;
        let loss = g.nll / g.tokens as f64;
        if g.overflow {
            self.scaler.overflow();
            return Ok(self.skipped(loss, scale));
        }
        self.apply_scaled_gradients(g.grads, loss)
    }

    /// Unscales, checks, clips and applies gradients that were computed
    /// with the current loss scale. Non-finite gradients skip the update
    /// and halve the scale.
    pub fn apply_scaled_gradients(&mut self, mut grads: Vec<Tensor>, loss: f64) -> Result<StepLog> {
        let scale = self.scaler.scale();
        if !self.scaler.unscale(&mut grads) {
            return Ok(self.skipped(loss, scale));
        }
        let norm = clip_gradients(&mut grads, self.config.clip_norm);
        adamw_step(
            self.model.store_mut(),
            &grads,
            &mut self.optimizer,
            self.config.learning_rate,
            self.config.weight_decay,
        )?;
        self.global_step += 1;
        Ok(StepLog {
            step: self.global_step,
            loss,
            grad_norm: norm,
            loss_scale: scale,
            skipped: false,
        })
    }

    fn skipped(&self, loss: f64, scale: f64) -> StepLog {
        log::warn!(
            "non-finite gradients after step {}; update skipped, loss scale now {}",
            self.global_step,
            self.scaler.scale()
        );
        StepLog {
            step: self.global_step,
            loss,
            grad_norm: f64::NAN,
            loss_scale: scale,
            skipped: true,
        }
    }

    /// Scaled gradients of a group as [`Trainer::apply_scaled_gradients`]
    /// expects them, or `None` if the scaled loss overflowed.
    pub fn scaled_gradients(&self, group: &[Batch]) -> Result<Option<Vec<Tensor>>> {
        let g = self.group_gradients(group, self.scaler.scale())?;
        Ok((!g.overflow).then_some(g.grads))
    }

    /// Post-unscale gradients of the group objective, with no update applied.
    /// `None` when they are not finite.
    pub fn gradients(&self, group: &[Batch], scale: f64) -> Result<Option<Vec<Tensor>>> {
        let mut g = self.group_gradients(group, scale)?;
        let mut probe = LossScaler::new(scale);
        Ok((!g.overflow && probe.unscale(&mut g.grads)).then_some(g.grads))
    }

    /// Accumulated scaled gradients of a group.
    ///
    /// Each micro-batch `b` contributes `w·nll_b + λ·(c_b/C)·Σw²` (mean form,
    /// `w = 1/C`, `C` the group's target tokens) so the sum over the group
    /// is the objective of all its examples taken as one batch.
    fn group_gradients(&self, group: &[Batch], scale: f64) -> Result<GroupGrads> {
        let total: usize = group.iter().map(Batch::token_count).sum();
        if total == 0 {
            return Err(Error::AllPadded);
        }
        let store = self.model.store();
        let mut out = GroupGrads {
            grads: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            nll: 0.0,
            tokens: total,
            overflow: false,
        };
        for batch in group {
            let c = batch.token_count();
            let (w_nll, w_l2) = match self.config.loss_form {
                LossForm::Mean => (1.0 / total as f64, c as f64 / total as f64),
                LossForm::Sum => (1.0, 1.0 / group.len() as f64),
            };
            let mut tape = Tape::with_precision(self.config.precision);
            let net = Net::bind(&mut tape, &self.model, true);
            let logits = batch_logits(&mut tape, &net, batch)?;
            let nll = summed_nll(&mut tape, &logits, batch)?;
            out.nll += tape.value(nll).item();
            let data = tape.scale(nll, w_nll)?;
            let l2 = decay_vars(&net);
            let objective = penalized(&mut tape, data, &l2, self.config.lambda * w_l2)?;
            let scaled = match tape.scale(objective, scale) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    out.overflow = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(scaled)?;
            for (i, acc) in out.grads.iter_mut().enumerate() {
                if let Some(g) = grads.get(net.bound().var(i)) {
                    let half = self.config.precision == Precision::Half;
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += if half { round_half(x) } else { x };
                    }
                }
            }
        }
        if !out.nll.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        Ok(out)
    }

    /// Snapshot for saving; `vocab` is stored alongside.
    pub fn checkpoint(&self, vocab: &Vocabulary, with_optimizer: bool) -> ModelCheckpoint {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            vocab: vocab.clone(),
            params: self.model.store().iter().map(|(n, t)| (n.into(), t.clone())).collect(),
            optimizer: with_optimizer.then(|| self.optimizer.clone()),
            epoch: self.epoch,
            global_step: self.global_step,
            loss_scale: self.scaler.scale(),
            skipped_steps: self.scaler.skipped(),
            rng: self.rng.state(),
        }
    }

    /// Restores a trainer, continuing exactly where the checkpoint stopped.
    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<(Self, Vocabulary)> {
        let model = ModelParams::from_named(ck.model_config, ck.params)?;
        let mut t = Self::new(model, ck.train_config)?;
        if let Some(opt) = ck.optimizer {
            if !opt.matches(t.model.store()) {
                return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
            }
            t.optimizer = opt;
        }
        t.scaler = LossScaler::restore(ck.loss_scale, ck.skipped_steps);
        t.rng = Rng::from_state(ck.rng);
        t.epoch = ck.epoch;
        t.global_step = ck.global_step;
        Ok((t, ck.vocab))
    }
}

fn batch_logits(tape: &mut Tape, net: &Net<'_>, batch: &Batch) -> Result<Vec<Var>> {
    let mut logits = Vec::with_capacity(batch.len());
    for (f, ids) in batch.features.iter().zip(&batch.input_ids) {
        let input = VisualInput::from_tensor(f, net.params())?;
        logits.push(net.forward(tape, &input, ids)?);
    }
    Ok(logits)
}

fn decay_vars(net: &Net<'_>) -> Vec<Var> {
    let store = net.params().store();
    (0..store.len()).filter(|&i| store.decays(i)).map(|i| net.bound().var(i)).collect()
}

/// Mean NLL per target token of `data` under `model`, batched in example
/// order.
pub fn evaluate_loss(model: &ModelParams, data: &TrainData, batch_size: usize, max_len: usize) -> Result<f64> {
    let batches = batch_examples(&data.examples, &data.features, &data.vocab, batch_size, max_len)?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for batch in &batches {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, model, false);
        let logits = batch_logits(&mut tape, &net, batch)?;
        let s = summed_nll(&mut tape, &logits, batch)?;
        nll += tape.value(s).item();
        tokens += batch.token_count();
    }
    if tokens == 0 {
        return Err(Error::AllPadded);
    }
    Ok(nll / tokens as f64)
}
