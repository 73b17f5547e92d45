//! Parameter inventory of each architecture, as (path, shape, init) triples.
//!
//! The same inventory drives weight allocation in [`Model::build`] and the
//! allocation-free accounting in [`ModelLayout`].
//!
//! [`Model::build`]: super::Model::build

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ArchConfig, Stack, Variant};
use super::host::{ParamHost, ParamInfo};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::peft::PeftState;

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std²) truncated at ±2 std.
    TruncNormal(f64),
    Uniform(f64),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape.to_vec(), |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            }
            Init::Uniform(bound) => {
                Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.into(),
            init,
        }
    }
}

/// Per-parameter RNG stream, so a parameter's initial value depends only on
/// the model seed and its own path.
pub(crate) fn param_seed(seed: u64, path: &str) -> u64 {
    let digest = Sha256::digest(path.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(word)
}

fn push_linear(out: &mut Vec<ParamSpec>, path: &str, d_out: usize, d_in: usize) {
    out.push(ParamSpec::new(
        format!("{path}.weight"),
        [d_out, d_in],
        Init::TruncNormal(WEIGHT_STD),
    ));
    out.push(ParamSpec::new(format!("{path}.bias"), [d_out], Init::Zeros));
}

fn push_norm(out: &mut Vec<ParamSpec>, path: &str, d: usize) {
    out.push(ParamSpec::new(format!("{path}.gamma"), [d], Init::Ones));
    out.push(ParamSpec::new(format!("{path}.beta"), [d], Init::Zeros));
}

fn push_conv(out: &mut Vec<ParamSpec>, path: &str, shape: [usize; 5], bias: usize) {
    out.push(ParamSpec::new(
        format!("{path}.weight"),
        shape,
        Init::TruncNormal(WEIGHT_STD),
    ));
    out.push(ParamSpec::new(format!("{path}.bias"), [bias], Init::Zeros));
}

fn push_block(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ArchConfig) {
    let d = cfg.embed_dim;
    push_norm(out, &format!("{prefix}.norm1"), d);
    for proj in ["q", "k", "v", "out"] {
        push_linear(out, &format!("{prefix}.attn.{proj}"), d, d);
    }
    push_norm(out, &format!("{prefix}.norm2"), d);
    push_linear(out, &format!("{prefix}.mlp.fc1"), cfg.mlp_hidden(), d);
    push_linear(out, &format!("{prefix}.mlp.fc2"), d, cfg.mlp_hidden());
}

pub fn stage_prefix(stage: usize) -> String {
    format!("decoder.stages.{stage}")
}

/// Every parameter of the freshly built model, in construction order.
pub fn base_layout(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut out = Vec::new();
    push_linear(&mut out, "encoder.patch_embed", d, cfg.patch_volume());
    out.push(ParamSpec::new(
        "encoder.pos_embed",
        [cfg.num_tokens(), d],
        Init::TruncNormal(WEIGHT_STD),
    ));
    for i in 0..cfg.encoder_layers {
        push_block(&mut out, &Stack::Encoder.block(i), cfg);
    }
    match cfg.variant {
        Variant::VitVit => {
            for i in 0..cfg.decoder_layers {
                push_block(&mut out, &Stack::Decoder.block(i), cfg);
            }
            push_linear(&mut out, "decoder.unembed", cfg.patch_volume(), d);
        }
        Variant::VitCnn => {
            let plan = cfg.skip_plan();
            let mut prev = d;
            for (j, &ch) in cfg.decoder_channels.iter().enumerate() {
                let prefix = stage_prefix(j);
                push_conv(&mut out, &format!("{prefix}.up"), [prev, ch, 2, 2, 2], ch);
                let factor = 1usize << (j + 1);
                for layer in &plan.per_stage[j] {
                    push_conv(
                        &mut out,
                        &format!("{prefix}.skips.{layer}"),
                        [d, ch, factor, factor, factor],
                        ch,
                    );
                }
                push_conv(&mut out, &format!("{prefix}.conv"), [ch, ch, 3, 3, 3], ch);
                push_norm(&mut out, &format!("{prefix}.norm"), ch);
                prev = ch;
            }
            push_conv(&mut out, "decoder.head", [1, prev, 1, 1, 1], 1);
        }
    }
    out
}

/// Shape-only stand-in for a [`Model`](super::Model): the parameter table
/// without weights. PEFT methods apply to it exactly as to a real model,
/// which makes parameter accounting possible at sizes too large to allocate.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    config: ArchConfig,
    params: IndexMap<String, (Vec<usize>, bool)>,
    peft: PeftState,
}

impl ModelLayout {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let params = base_layout(config)
            .into_iter()
            .map(|s| (s.path, (s.shape, true)))
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            peft: PeftState::default(),
        })
    }
}

impl ParamHost for ModelLayout {
    fn config(&self) -> &ArchConfig {
        &self.config
    }

    fn peft(&self) -> &PeftState {
        &self.peft
    }

    fn peft_mut(&mut self) -> &mut PeftState {
        &mut self.peft
    }

    fn param_infos(&self) -> Vec<ParamInfo> {
        self.params
            .iter()
            .map(|(path, (shape, trainable))| ParamInfo {
                path: path.clone(),
                shape: shape.clone(),
                trainable: *trainable,
            })
            .collect()
    }

    fn shape_of(&self, path: &str) -> Option<Vec<usize>> {
        self.params.get(path).map(|(s, _)| s.clone())
    }

    fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        let entry = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))?;
        entry.1 = trainable;
        Ok(())
    }

    fn insert(&mut self, spec: ParamSpec) -> Result<()> {
        if self.params.contains_key(&spec.path) {
            return Err(Error::Contract(format!(
                "parameter '{}' already exists",
                spec.path
            )));
        }
        self.params.insert(spec.path, (spec.shape, true));
        Ok(())
    }
}
