//! Mix-PEFT: independent methods on encoder and decoder, optional BitFit
//! over the whole model, the PETITE recipes, and parameter accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelLayout, ParamHost, Stack, Variant};
use crate::peft::{apply, freeze_all, unfreeze_all, MethodKind, PeftMethod, Selector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    NoFt,
    FullFt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixPlan {
    pub name: String,
    #[serde(default)]
    pub encoder_method: Option<PeftMethod>,
    #[serde(default)]
    pub decoder_method: Option<PeftMethod>,
    #[serde(default)]
    pub bitfit_all_layers: bool,
    #[serde(default)]
    pub baseline: Option<Baseline>,
}

/// Hyperparameters used for `kind` on one side of `variant`, following the
/// per-architecture settings of the reference experiments.
pub fn method_preset(kind: MethodKind, variant: Variant, stack: Stack) -> PeftMethod {
    match (kind, variant) {
        (MethodKind::Lora, Variant::VitVit) => PeftMethod::lora(8),
        (MethodKind::Lora, Variant::VitCnn) => PeftMethod::lora(4),
        (MethodKind::Adapters, Variant::VitVit) => PeftMethod::adapters(8),
        (MethodKind::Adapters, Variant::VitCnn) => match stack {
            Stack::Encoder => PeftMethod::adapters(16),
            Stack::Decoder => PeftMethod::adapters(4),
        },
        (MethodKind::Vpt, Variant::VitVit) => PeftMethod::vpt(8),
        (MethodKind::Vpt, Variant::VitCnn) => PeftMethod::vpt(50),
        (kind, _) => PeftMethod::new(kind),
    }
}

impl MixPlan {
    pub fn baseline(baseline: Baseline) -> Self {
        let name = match baseline {
            Baseline::NoFt => "no-ft",
            Baseline::FullFt => "full-ft",
        };
        Self {
            name: name.into(),
            encoder_method: None,
            decoder_method: None,
            bitfit_all_layers: false,
            baseline: Some(baseline),
        }
    }

    /// One method over the whole model. Prompt tuning goes to the encoder only.
    pub fn single(kind: MethodKind, variant: Variant) -> Self {
        let decoder =
            (kind != MethodKind::Vpt).then(|| method_preset(kind, variant, Stack::Decoder));
        Self {
            name: kind.name().into(),
            encoder_method: Some(method_preset(kind, variant, Stack::Encoder)),
            decoder_method: decoder,
            bitfit_all_layers: false,
            baseline: None,
        }
    }

    pub fn mix(variant: Variant, encoder: MethodKind, decoder: MethodKind, bitfit: bool) -> Self {
        let mut name = format!("mix:{encoder}+{decoder}");
        if !bitfit {
            name.push_str("-nobitfit");
        }
        Self {
            name,
            encoder_method: Some(method_preset(encoder, variant, Stack::Encoder)),
            decoder_method: Some(method_preset(decoder, variant, Stack::Decoder)),
            bitfit_all_layers: bitfit,
            baseline: None,
        }
    }

    /// VPT on the encoder, LoRA on the decoder, BitFit everywhere.
    pub fn petite_vitvit() -> Self {
        Self {
            name: "petite-vitvit".into(),
            ..Self::mix(Variant::VitVit, MethodKind::Vpt, MethodKind::Lora, true)
        }
    }

    /// LoRA on the encoder, SSF on the decoder, BitFit everywhere.
    pub fn petite_vitcnn() -> Self {
        Self {
            name: "petite-vitcnn".into(),
            ..Self::mix(Variant::VitCnn, MethodKind::Lora, MethodKind::Ssf, true)
        }
    }

    pub fn petite(variant: Variant) -> Self {
        match variant {
            Variant::VitVit => Self::petite_vitvit(),
            Variant::VitCnn => Self::petite_vitcnn(),
        }
    }

    /// Resolves a plan name: `no-ft`, `full-ft`, a single method name,
    /// `petite-vitvit`, `petite-vitcnn`, or `mix:<encoder>+<decoder>`
    /// (BitFit on; append `-nobitfit` to turn it off).
    pub fn preset(name: &str, variant: Variant) -> Result<Self> {
        let plan = match name {
            "no-ft" => Self::baseline(Baseline::NoFt),
            "full-ft" => Self::baseline(Baseline::FullFt),
            "petite-vitvit" => Self::petite_vitvit(),
            "petite-vitcnn" => Self::petite_vitcnn(),
            "petite" => Self::petite(variant),
            _ => {
                if let Some(rest) = name.strip_prefix("mix:") {
                    let (rest, bitfit) = match rest.strip_suffix("-nobitfit") {
                        Some(r) => (r, false),
                        None => (rest, true),
                    };
                    let (enc, dec) = rest.split_once('+').ok_or_else(|| {
                        Error::Config(format!("mix plan '{name}' needs <encoder>+<decoder>"))
                    })?;
                    Self::mix(variant, enc.parse()?, dec.parse()?, bitfit)
                } else {
                    Self::single(name.parse()?, variant)
                }
            }
        };
        Ok(plan)
    }

    pub fn encoder_kind(&self) -> Option<MethodKind> {
        self.encoder_method.as_ref().map(|m| m.kind)
    }

    pub fn decoder_kind(&self) -> Option<MethodKind> {
        self.decoder_method.as_ref().map(|m| m.kind)
    }

    pub fn check_feasible(&self, variant: Variant) -> Result<()> {
        if self.baseline.is_some()
            && (self.encoder_method.is_some() || self.decoder_method.is_some())
        {
            return Err(Error::Infeasible(format!(
                "plan '{}' is a baseline and cannot also carry PEFT methods",
                self.name
            )));
        }
        if variant == Variant::VitCnn && self.decoder_kind() == Some(MethodKind::Vpt) {
            return Err(Error::Infeasible(format!(
                "plan '{}': prompt tuning cannot be applied to the convolutional decoder",
                self.name
            )));
        }
        for m in self.encoder_method.iter().chain(&self.decoder_method) {
            m.validate()?;
        }
        Ok(())
    }
}

impl fmt::Display for MixPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Applies `plan` to a pre-trained host and reports the resulting budget.
/// Feasibility is checked before anything is modified.
pub fn compose<H: ParamHost + ?Sized>(plan: &MixPlan, host: &mut H) -> Result<ParamReport> {
    plan.check_feasible(host.config().variant)?;
    match plan.baseline {
        Some(Baseline::NoFt) => freeze_all(host),
        Some(Baseline::FullFt) => unfreeze_all(host),
        None => {
            freeze_all(host);
            if let Some(m) = &plan.encoder_method {
                apply(host, m, Selector::Encoder)?;
            }
            if let Some(m) = &plan.decoder_method {
                apply(host, m, Selector::Decoder)?;
            }
            if plan.bitfit_all_layers {
                apply(host, &PeftMethod::bitfit(), Selector::Whole)?;
            }
        }
    }
    Ok(count_params(host))
}

/// Every Mix-PEFT pairing for `variant`, all with BitFit on.
pub fn enumerate_combinations(variant: Variant) -> Vec<MixPlan> {
    use MethodKind::*;
    let (encoders, decoders): (&[MethodKind], &[MethodKind]) = match variant {
        Variant::VitVit => (&[Lora, Adapters, Vpt, Ssf], &[Lora, Adapters, Ssf, Vpt]),
        Variant::VitCnn => (&[Lora, Adapters, Vpt, Ssf], &[Lora, Adapters, Ssf]),
    };
    let mut plans = Vec::new();
    for &e in encoders {
        for &d in decoders {
            if e != d {
                plans.push(MixPlan::mix(variant, e, d, true));
            }
        }
    }
    plans
}

/// Single-method and baseline plans compared against the mixes.
pub fn standard_plans(variant: Variant) -> Vec<MixPlan> {
    let mut plans = vec![
        MixPlan::baseline(Baseline::NoFt),
        MixPlan::baseline(Baseline::FullFt),
    ];
    plans.extend(MethodKind::ALL.iter().map(|&k| MixPlan::single(k, variant)));
    plans.push(MixPlan::petite(variant));
    plans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    /// `trainable / total`, where `total` includes injected PEFT parameters.
    pub fraction: f64,
    pub per_module: BTreeMap<String, ModuleCount>,
}

impl ParamReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.fraction
    }
}

/// Grouping key for the per-module breakdown: `encoder.blocks.3`,
/// `decoder.stages.0`, `encoder.prompts.1`, `encoder.patch_embed`, ...
pub fn module_of(path: &str) -> String {
    let parts: Vec<&str> = path.split('.').collect();
    let depth = match parts.get(1) {
        Some(&("blocks" | "stages" | "prompts")) => 3,
        _ => 2,
    };
    parts[..depth.min(parts.len())].join(".")
}

pub fn count_params<H: ParamHost + ?Sized>(host: &H) -> ParamReport {
    let mut per_module: BTreeMap<String, ModuleCount> = BTreeMap::new();
    let (mut total, mut trainable) = (0, 0);
    for info in host.param_infos() {
        let n = info.numel();
        let entry = per_module.entry(module_of(&info.path)).or_default();
        entry.total += n;
        total += n;
        if info.trainable {
            entry.trainable += n;
            trainable += n;
        }
    }
    ParamReport {
        total,
        trainable,
        fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
        per_module,
    }
}

/// Budget of `plan` on `config` computed from shapes only.
pub fn dry_run_count(config: &ArchConfig, plan: &MixPlan) -> Result<ParamReport> {
    let mut layout = ModelLayout::new(config)?;
    compose(plan, &mut layout)
}

/// Trainable paths of a host, for set algebra in reports and tests.
pub fn trainable_set<H: ParamHost + ?Sized>(host: &H) -> BTreeSet<String> {
    host.trainable_paths().into_iter().collect()
}
