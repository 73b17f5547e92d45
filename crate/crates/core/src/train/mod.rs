//! Optimizers, learning-rate schedules, the pre-training and fine-tuning
//! loops, best-epoch selection, checkpoints and history files.
//!
//! A run is a sequence of batch steps. The batch order of epoch `e` is a
//! shuffle seeded from `(hp.seed, e)`, so a run's position is fully described
//! by its global step and no RNG state has to be persisted.

mod checkpoint;
mod history;
mod hparams;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use history::{history_csv, write_history};
pub use hparams::{
    lr_at, Hyperparams, OptimizerKind, PresetColumn, Schedule, DESK_PRETRAIN_EPOCHS,
    PAPER_BATCH_SIZE, PAPER_PRETRAIN_EPOCHS, WARMUP_FRACTION,
};
pub use optim::{Moments, Optimizer, OptimizerMeta, BETA1, BETA2, EPS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::mix::{compose, MixPlan};
use crate::model::Model;
use crate::peft::unfreeze_all;
use crate::scanner::Pair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; 0 marks an evaluation-only record.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(with = "metrics::inf_sentinel")]
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_nrmse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Best {
    pub epoch: usize,
    pub psnr: f64,
    pub model: Model,
}

/// Everything needed to continue a run; this is what a checkpoint stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub plan: Option<MixPlan>,
    pub hp: Hyperparams,
    pub optimizer: Optimizer,
    pub global_step: usize,
    /// Sum and count of batch losses in the epoch in progress.
    pub epoch_loss: (f64, usize),
    pub history: Vec<EpochRecord>,
    pub best: Option<Best>,
}

pub type Checkpoint = TrainState;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation PSNR.
    pub model: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn evaluate(model: &Model, data: &[Pair]) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds: Vec<Tensor> = data
        .par_iter()
        .map(|p| model.forward(&p.input))
        .collect::<Result<_>>()?;
    MetricReport::from_pairs(preds.iter().zip(data).map(|(p, d)| (p, &d.target)))
}

/// Loss and per-trainable-parameter gradients of one sample, in model order.
fn sample_grads(model: &Model, pair: &Pair) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(pair.input.clone());
    let y = model.forward_var(&mut tape, &bound, x)?;
    let t = tape.constant(pair.target.clone());
    let loss = tape.mse_loss(y, t)?;
    let grads = tape.backward(loss)?;
    let out = bound
        .trainable()
        .iter()
        .map(|(path, v)| {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec()));
            (path.clone(), g)
        })
        .collect();
    Ok((tape.value(loss).item()?, out))
}

fn mix(seed: u64, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Sample indices of epoch `epoch` (0-based): a seeded shuffle, cycled to
/// fill whole batches when the pool is smaller than `steps · batch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    let steps = n.div_ceil(batch);
    idx.iter().cycle().take(steps * batch).copied().collect()
}

/// SHA-256 over the paths and bit patterns of every parameter matching `pred`.
pub fn params_digest(model: &Model, pred: impl Fn(&crate::model::Parameter) -> bool) -> String {
    let mut h = Sha256::new();
    for p in model.parameters().filter(|p| pred(p)) {
        h.update(p.path.as_bytes());
        h.update([0]);
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn frozen_digest(model: &Model) -> String {
    params_digest(model, |p| !p.trainable)
}

impl TrainState {
    pub fn new(model: Model, hp: Hyperparams, plan: Option<MixPlan>) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            model,
            plan,
            optimizer: Optimizer::new(hp.optimizer, hp.weight_decay),
            hp,
            global_step: 0,
            epoch_loss: (0.0, 0),
            history: Vec::new(),
            best: None,
        })
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.hp.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.hp.epochs * self.steps_per_epoch(n_train)
    }

    pub fn is_finished(&self, n_train: usize) -> bool {
        self.global_step >= self.total_steps(n_train)
    }

    pub fn current_lr(&self, n_train: usize) -> Result<f64> {
        let total = self.total_steps(n_train);
        lr_at(
            self.hp.schedule,
            self.global_step.min(total),
            total,
            self.hp.learning_rate,
        )
    }

    /// One optimizer update on the next batch, closing the epoch (validation,
    /// history, best snapshot) when it was the epoch's last batch. Returns
    /// the batch loss.
    pub fn step(&mut self, train: &[Pair], val: &[Pair]) -> Result<f64> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.is_finished(train.len()) {
            return Err(Error::Contract("training run is already complete".into()));
        }
        let spe = self.steps_per_epoch(train.len());
        let b = self.hp.batch_size;
        let (epoch, k) = (self.global_step / spe, self.global_step % spe);
        let order = epoch_order(self.hp.seed, epoch, train.len(), b);
        let batch = &order[k * b..(k + 1) * b];
        let numeric = |detail: String| Error::Numeric {
            epoch: epoch + 1,
            step: self.global_step,
            detail,
        };

        let model = &self.model;
        let per_sample: Vec<(f64, Vec<(String, Tensor)>)> = batch
            .par_iter()
            .map(|&i| sample_grads(model, &train[i]))
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<(String, Tensor)> = Vec::new();
        for (l, g) in per_sample {
            loss += l * scale;
            if grads.is_empty() {
                grads = g
                    .into_iter()
                    .map(|(p, t)| (p, t.map(|v| v * scale)))
                    .collect();
            } else {
                for ((_, acc), (_, t)) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += v * scale;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(numeric(format!("training loss is {loss}")));
        }
        if let Some((path, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(numeric(format!("gradient of '{path}' is not finite")));
        }
        let lr = self.current_lr(train.len())?;
        self.optimizer.apply(&mut self.model, &grads, lr)?;
        if let Some(p) = self
            .model
            .parameters()
            .find(|p| p.trainable && !p.value.is_finite())
        {
            return Err(numeric(format!("parameter '{}' became non-finite", p.path)));
        }
        self.global_step += 1;
        self.epoch_loss.0 += loss;
        self.epoch_loss.1 += 1;
        if self.global_step.is_multiple_of(spe) {
            self.end_epoch(train.len(), val)?;
        }
        Ok(loss)
    }

    /// Closes the epoch that just ended: validation, history, best snapshot.
    fn end_epoch(&mut self, n_train: usize, val: &[Pair]) -> Result<()> {
        let spe = self.steps_per_epoch(n_train);
        let epoch = self.global_step / spe;
        let report = evaluate(&self.model, val)?;
        // An infinite PSNR is an exact reconstruction; anything else
        // non-finite means the parameters blew up without tripping NaN yet.
        if report.psnr.is_nan() || !report.ssim.is_finite() || !report.nrmse.is_finite() {
            return Err(Error::Numeric {
                epoch,
                step: self.global_step - 1,
                detail: "validation metrics are not finite".into(),
            });
        }
        let (sum, count) = self.epoch_loss;
        let lr = lr_at(
            self.hp.schedule,
            self.global_step - 1,
            self.total_steps(n_train),
            self.hp.learning_rate,
        )?;
        self.history.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_psnr: report.psnr,
            val_ssim: report.ssim,
            val_nrmse: report.nrmse,
            lr,
        });
        self.epoch_loss = (0.0, 0);
        // Strictly greater: ties keep the earlier epoch.
        if self.best.as_ref().is_none_or(|b| report.psnr > b.psnr) {
            self.best = Some(Best {
                epoch,
                psnr: report.psnr,
                model: self.model.clone(),
            });
        }
        Ok(())
    }

    /// Runs the remaining steps, validating after every epoch.
    pub fn run(&mut self, train: &[Pair], val: &[Pair]) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        while !self.is_finished(train.len()) {
            self.step(train, val)?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let best = self.best.unwrap_or(Best {
            epoch: 0,
            psnr: f64::NAN,
            model: self.model.clone(),
        });
        TrainOutcome {
            model: best.model,
            last: self.model,
            best_epoch: best.epoch,
            history: self.history,
        }
    }
}

/// Trains every parameter on short→long MSE.
pub fn pretrain(
    model: Model,
    train: &[Pair],
    val: &[Pair],
    hp: &Hyperparams,
) -> Result<TrainOutcome> {
    pretrain_state(model, train, val, hp).map(TrainState::into_outcome)
}

/// [`pretrain`], keeping the full state for checkpointing.
pub fn pretrain_state(
    mut model: Model,
    train: &[Pair],
    val: &[Pair],
    hp: &Hyperparams,
) -> Result<TrainState> {
    unfreeze_all(&mut model);
    let mut state = TrainState::new(model, hp.clone(), None)?;
    state.run(train, val)?;
    Ok(state)
}

/// Applies `plan` to a pre-trained model and optimizes only what it unfreezes.
/// A plan with nothing to train yields a single evaluation-only record.
pub fn peft_finetune(
    model: Model,
    plan: &MixPlan,
    train: &[Pair],
    val: &[Pair],
    hp: &Hyperparams,
) -> Result<TrainOutcome> {
    finetune_state(model, plan, train, val, hp).map(TrainState::into_outcome)
}

/// [`peft_finetune`], keeping the full state for checkpointing.
pub fn finetune_state(
    mut model: Model,
    plan: &MixPlan,
    train: &[Pair],
    val: &[Pair],
    hp: &Hyperparams,
) -> Result<TrainState> {
    hp.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    compose(plan, &mut model)?;
    let mut state = TrainState::new(model, hp.clone(), Some(plan.clone()))?;
    if state.model.num_trainable() == 0 {
        let report = evaluate(&state.model, val)?;
        let train_loss = train
            .iter()
            .map(|p| metrics::mse(&state.model.forward(&p.input)?, &p.target))
            .sum::<Result<f64>>()?
            / train.len() as f64;
        state.history.push(EpochRecord {
            epoch: 0,
            train_loss,
            val_psnr: report.psnr,
            val_ssim: report.ssim,
            val_nrmse: report.nrmse,
            lr: 0.0,
        });
        state.best = Some(Best {
            epoch: 0,
            psnr: report.psnr,
            model: state.model.clone(),
        });
        return Ok(state);
    }
    state.run(train, val)?;
    Ok(state)
}
