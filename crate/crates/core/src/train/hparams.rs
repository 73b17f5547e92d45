use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix::MixPlan;
use crate::model::Variant;
use crate::peft::MethodKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[serde(alias = "cosine")]
    CosineAnneal,
    WarmupCosine,
}

/// Fraction of the run spent on the linear warmup of `WarmupCosine`.
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Column of the published per-method hyperparameter tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PresetColumn {
    Baseline,
    LayerNorm,
    BitFit,
    Lora,
    Adapters,
    Vpt,
    Ssf,
    Petite,
}

impl PresetColumn {
    const ORDER: [PresetColumn; 8] = [
        Self::Baseline,
        Self::LayerNorm,
        Self::BitFit,
        Self::Lora,
        Self::Adapters,
        Self::Vpt,
        Self::Ssf,
        Self::Petite,
    ];

    fn index(self) -> usize {
        Self::ORDER.iter().position(|&c| c == self).expect("listed")
    }

    /// Baselines and single methods use their own column; every mixed plan is
    /// trained with the PETITE settings.
    pub fn for_plan(plan: &MixPlan) -> Self {
        if plan.baseline.is_some() {
            return Self::Baseline;
        }
        let single = match (plan.encoder_kind(), plan.decoder_kind()) {
            (Some(e), Some(d)) if e == d => Some(e),
            (Some(e), None) => Some(e),
            (None, Some(d)) => Some(d),
            _ => None,
        };
        match single {
            Some(kind) if !plan.bitfit_all_layers || kind == MethodKind::BitFit => Self::from(kind),
            _ => Self::Petite,
        }
    }
}

impl From<MethodKind> for PresetColumn {
    fn from(kind: MethodKind) -> Self {
        match kind {
            MethodKind::LayerNormTune => Self::LayerNorm,
            MethodKind::BitFit => Self::BitFit,
            MethodKind::Lora => Self::Lora,
            MethodKind::Adapters => Self::Adapters,
            MethodKind::Vpt => Self::Vpt,
            MethodKind::Ssf => Self::Ssf,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CosineAnneal => "cosine-anneal",
            Self::WarmupCosine => "warmup-cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cosineanneal" | "cosine" => Ok(Self::CosineAnneal),
            "warmupcosine" => Ok(Self::WarmupCosine),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

pub const PAPER_BATCH_SIZE: usize = 6;
pub const PAPER_PRETRAIN_EPOCHS: usize = 1000;
pub const DESK_PRETRAIN_EPOCHS: usize = 200;

impl Hyperparams {
    /// Fine-tuning settings of the published tables for one method column.
    pub fn paper(variant: Variant, column: PresetColumn) -> Self {
        use OptimizerKind::*;
        use Schedule::*;
        let i = column.index();
        let (lr, wd, opt, sched, epochs) = match variant {
            Variant::VitVit => {
                let lr = [1e-3, 1e-3, 1e-3, 1e-3, 1e-2, 1e-3, 1e-2, 1e-3][i];
                let wd = [1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-6, 1e-5][i];
                (lr, wd, if i < 4 { Adam } else { AdamW }, CosineAnneal, 150)
            }
            Variant::VitCnn => {
                let lr = [1e-3, 1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2, 1e-3][i];
                let wd = [1e-5, 1e-5, 1e-5, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5][i];
                (
                    lr,
                    wd,
                    AdamW,
                    if i < 6 { WarmupCosine } else { CosineAnneal },
                    200,
                )
            }
        };
        Self {
            learning_rate: lr,
            weight_decay: wd,
            optimizer: opt,
            schedule: sched,
            epochs,
            batch_size: PAPER_BATCH_SIZE,
            seed: 0,
        }
    }

    /// [`paper`](Self::paper) with 10× fewer epochs.
    pub fn desk(variant: Variant, column: PresetColumn) -> Self {
        let mut hp = Self::paper(variant, column);
        hp.epochs /= 10;
        hp
    }

    pub fn for_plan(variant: Variant, plan: &MixPlan, desk: bool) -> Self {
        let column = PresetColumn::for_plan(plan);
        if desk {
            Self::desk(variant, column)
        } else {
            Self::paper(variant, column)
        }
    }

    /// Pre-training settings. Only the epoch count is published; the rest
    /// reuses the full fine-tuning column.
    pub fn pretrain(variant: Variant, desk: bool) -> Self {
        let mut hp = Self::paper(variant, PresetColumn::Baseline);
        hp.optimizer = OptimizerKind::AdamW;
        hp.schedule = Schedule::CosineAnneal;
        hp.epochs = if desk {
            DESK_PRETRAIN_EPOCHS
        } else {
            PAPER_PRETRAIN_EPOCHS
        };
        hp
    }

    /// Zero learning rates are accepted so a run can act as a no-op probe.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate before update `step` of a run of `total` updates.
pub fn lr_at(schedule: Schedule, step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!(
            "step {step} is past the end of a {total}-step schedule"
        )));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    let cosine = |t: f64| base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    let (s, n) = (step as f64, total as f64);
    Ok(match schedule {
        Schedule::CosineAnneal => cosine(s / n),
        Schedule::WarmupCosine => {
            let warm = WARMUP_FRACTION * n;
            if s < warm {
                base_lr * s / warm
            } else {
                cosine((s - warm) / (n - warm))
            }
        }
    })
}
