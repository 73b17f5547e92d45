//! Experiment configuration, read from a TOML file whose sections mirror the
//! library modules (`model`, `scanner`, `mix`, `pretrain`, `train`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use petite_core::mix::MixPlan;
use petite_core::model::{ArchConfig, Variant};
use petite_core::scanner::{profile, ScannerProfile};
use petite_core::train::{Hyperparams, OptimizerKind, Schedule};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub scanner: ScannerSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    #[default]
    Desk,
    PaperLike,
}

/// An architecture preset with optional per-field overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default)]
    pub preset: ArchPreset,
    pub volume_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub decoder_channels: Option<Vec<usize>>,
    pub mlp_ratio: Option<usize>,
    pub skip_layers: Option<Vec<usize>>,
    pub peft_encoder_layers: Option<usize>,
    pub peft_decoder_layers: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerSection {
    pub source: u8,
    pub target: u8,
    pub source_train: usize,
    pub target_train: usize,
    pub val: usize,
}

impl Default for ScannerSection {
    fn default() -> Self {
        Self {
            source: 1,
            target: 4,
            source_train: 20,
            target_train: 10,
            val: 4,
        }
    }
}

/// Either a preset name or a full inline plan.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    pub preset: Option<String>,
    pub plan: Option<MixPlan>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperPreset {
    /// Published settings with 10× fewer epochs.
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub preset: HyperPreset,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub schedule: Option<Schedule>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl TrainSection {
    fn apply(&self, mut hp: Hyperparams, seed: u64) -> Result<Hyperparams, CliError> {
        if let Some(v) = self.learning_rate {
            hp.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            hp.weight_decay = v;
        }
        if let Some(v) = self.optimizer {
            hp.optimizer = v;
        }
        if let Some(v) = self.schedule {
            hp.schedule = v;
        }
        if let Some(v) = self.epochs {
            hp.epochs = v;
        }
        if let Some(v) = self.batch_size {
            hp.batch_size = v;
        }
        hp.seed = seed;
        hp.validate()?;
        Ok(hp)
    }

    fn desk(&self) -> bool {
        self.preset == HyperPreset::Desk
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Everything that can be checked without touching data or checkpoints.
    pub fn validate(&self) -> Result<(), CliError> {
        self.arch()?;
        self.plan()?.check_feasible(self.model.variant)?;
        self.source_profile()?;
        self.target_profile()?;
        self.pretrain_hyperparams()?;
        self.finetune_hyperparams()?;
        if self.mix.preset.is_some() && self.mix.plan.is_some() {
            return Err(CliError::Config(
                "[mix] takes either `preset` or `plan`, not both".into(),
            ));
        }
        let s = &self.scanner;
        if s.source_train == 0 || s.target_train == 0 || s.val == 0 {
            return Err(CliError::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    /// Cross-scanner runs need distinct source and target devices.
    pub fn check_cross_scanner(&self) -> Result<(), CliError> {
        if self.scanner.source == self.scanner.target {
            return Err(CliError::Config(format!(
                "source and target scanner are both {}",
                self.scanner.source
            )));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchConfig, CliError> {
        let m = &self.model;
        let mut cfg = match m.preset {
            ArchPreset::Desk => ArchConfig::desk(m.variant),
            ArchPreset::PaperLike => ArchConfig::paper_like(m.variant),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &m.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            volume_size,
            patch_size,
            embed_dim,
            num_heads,
            encoder_layers,
            decoder_layers,
            decoder_channels,
            mlp_ratio,
            skip_layers
        );
        if m.peft_encoder_layers.is_some() {
            cfg.peft_encoder_layers = m.peft_encoder_layers;
        }
        if m.peft_decoder_layers.is_some() {
            cfg.peft_decoder_layers = m.peft_decoder_layers;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self) -> Result<MixPlan, CliError> {
        match (&self.mix.plan, &self.mix.preset) {
            (Some(plan), _) => Ok(plan.clone()),
            (None, Some(name)) => Ok(MixPlan::preset(name, self.model.variant)?),
            (None, None) => Ok(MixPlan::petite(self.model.variant)),
        }
    }

    pub fn source_profile(&self) -> Result<ScannerProfile, CliError> {
        Ok(profile(self.scanner.source)?.mini())
    }

    pub fn target_profile(&self) -> Result<ScannerProfile, CliError> {
        Ok(profile(self.scanner.target)?.mini())
    }

    pub fn pretrain_hyperparams(&self) -> Result<Hyperparams, CliError> {
        let base = Hyperparams::pretrain(self.model.variant, self.pretrain.desk());
        self.pretrain.apply(base, self.seed)
    }

    pub fn finetune_hyperparams(&self) -> Result<Hyperparams, CliError> {
        self.hyperparams_for(&self.plan()?)
    }

    pub fn hyperparams_for(&self, plan: &MixPlan) -> Result<Hyperparams, CliError> {
        let base = Hyperparams::for_plan(self.model.variant, plan, self.train.desk());
        self.train.apply(base, self.seed)
    }
}
