use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::Stack;

/// Which PEFT modules are attached to a model and where.
///
/// Parameters of every injected module live in the model's parameter table
/// under the paths derived from these keys; this record only tells the
/// forward pass which hooks to run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeftState {
    /// Keyed by the host layer path (`encoder.blocks.0.attn.q`,
    /// `decoder.stages.1.conv`). Factors live at `<key>.lora_a` / `<key>.lora_b`.
    pub lora: BTreeMap<String, LoraSite>,
    /// Keyed by adapter path (`encoder.blocks.2.adapter`).
    pub adapters: BTreeMap<String, AdapterSite>,
    /// Keyed by SSF site path (`encoder.blocks.0.ssf.norm1`); scale and shift
    /// live at `<key>.scale` / `<key>.shift`.
    pub ssf: BTreeMap<String, SsfSite>,
    /// Prompt tokens inserted at the input of each layer of a transformer stack.
    pub prompts: BTreeMap<Stack, Vec<usize>>,
    pub lora_merged: bool,
    pub ssf_folded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostKind {
    Linear,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSite {
    pub rank: usize,
    pub alpha: f64,
    pub host: HostKind,
}

impl LoraSite {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub hidden: usize,
    pub host: HostKind,
}

/// The layer an SSF site follows; it decides how the site folds away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsfTarget {
    Linear,
    Conv,
    ConvTranspose,
    Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsfSite {
    pub follows: String,
    pub target: SsfTarget,
}

impl PeftState {
    pub fn is_empty(&self) -> bool {
        self.lora.is_empty()
            && self.adapters.is_empty()
            && self.ssf.is_empty()
            && self.prompts.is_empty()
    }

    pub fn prompt_schedule(&self, stack: Stack) -> Option<&[usize]> {
        self.prompts.get(&stack).map(Vec::as_slice)
    }

    /// Prompt tokens present in the output of 1-based `layer` of `stack`.
    pub fn prompts_through(&self, stack: Stack, layer: usize) -> usize {
        self.prompt_schedule(stack)
            .map(|s| s.iter().take(layer).sum())
            .unwrap_or(0)
    }
}

pub fn prompt_path(stack: Stack, layer_index: usize) -> String {
    format!("{}.prompts.{layer_index}", stack.prefix())
}
