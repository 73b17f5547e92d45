//! The six PEFT methods as transformations of a model's parameter table.
//!
//! Selective methods (LayerNorm tuning, BitFit) only flip trainable flags.
//! Additive methods (LoRA, adapters, SSF, VPT) insert new trainable
//! parameters and register the site in [`PeftState`] so the forward pass
//! runs the matching hook.

mod lora;
mod ssf;
mod state;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lora::merge_lora;
pub use ssf::{fold_ssf, FoldReport};
pub use state::{prompt_path, AdapterSite, HostKind, LoraSite, PeftState, SsfSite, SsfTarget};

use crate::error::{Error, Result};
use crate::model::{stage_prefix, Init, ParamHost, ParamSpec, Stack, Variant, WEIGHT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    LayerNormTune,
    BitFit,
    Lora,
    Adapters,
    Ssf,
    Vpt,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::LayerNormTune,
        MethodKind::BitFit,
        MethodKind::Lora,
        MethodKind::Adapters,
        MethodKind::Ssf,
        MethodKind::Vpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::LayerNormTune => "layernorm",
            MethodKind::BitFit => "bitfit",
            MethodKind::Lora => "lora",
            MethodKind::Adapters => "adapters",
            MethodKind::Ssf => "ssf",
            MethodKind::Vpt => "vpt",
        }
    }

    pub fn is_selective(self) -> bool {
        matches!(self, MethodKind::LayerNormTune | MethodKind::BitFit)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown PEFT method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    fn proj(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "out",
        }
    }
}

/// Where SSF modules go inside a transformer block. `LayerNorm` covers both
/// norms of the block. Convolutional stages always get all of theirs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsfPlacement {
    Mhsa,
    Mlp,
    LayerNorm,
}

fn default_targets() -> BTreeSet<LoraTarget> {
    [LoraTarget::Query, LoraTarget::Key].into()
}

fn default_sites() -> BTreeSet<SsfPlacement> {
    [
        SsfPlacement::Mhsa,
        SsfPlacement::Mlp,
        SsfPlacement::LayerNorm,
    ]
    .into()
}

/// One PEFT method and its hyperparameters. Fields not used by `kind` are
/// ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftMethod {
    pub kind: MethodKind,
    #[serde(default = "PeftMethod::default_rank")]
    pub lora_rank: usize,
    /// Defaults to the rank, giving a scaling of 1.
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    #[serde(default = "default_targets")]
    pub lora_targets: BTreeSet<LoraTarget>,
    #[serde(default = "PeftMethod::default_reduction")]
    pub adapter_reduction: usize,
    #[serde(default = "PeftMethod::default_prompts")]
    pub vpt_num_prompts: usize,
    #[serde(default = "PeftMethod::default_start")]
    pub vpt_start_layer: usize,
    /// Raw prompt count per layer input (index 0 is layer 1), overriding
    /// `vpt_num_prompts` / `vpt_start_layer`.
    #[serde(default)]
    pub vpt_layer_prompts: Option<Vec<usize>>,
    #[serde(default = "default_sites")]
    pub ssf_sites: BTreeSet<SsfPlacement>,
}

impl PeftMethod {
    fn default_rank() -> usize {
        8
    }
    fn default_reduction() -> usize {
        8
    }
    fn default_prompts() -> usize {
        8
    }
    fn default_start() -> usize {
        2
    }

    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            lora_rank: Self::default_rank(),
            lora_alpha: None,
            lora_targets: default_targets(),
            adapter_reduction: Self::default_reduction(),
            vpt_num_prompts: Self::default_prompts(),
            vpt_start_layer: Self::default_start(),
            vpt_layer_prompts: None,
            ssf_sites: default_sites(),
        }
    }

    pub fn layer_norm() -> Self {
        Self::new(MethodKind::LayerNormTune)
    }

    pub fn bitfit() -> Self {
        Self::new(MethodKind::BitFit)
    }

    pub fn lora(rank: usize) -> Self {
        Self {
            lora_rank: rank,
            ..Self::new(MethodKind::Lora)
        }
    }

    pub fn adapters(reduction: usize) -> Self {
        Self {
            adapter_reduction: reduction,
            ..Self::new(MethodKind::Adapters)
        }
    }

    pub fn ssf() -> Self {
        Self::new(MethodKind::Ssf)
    }

    pub fn vpt(prompts: usize) -> Self {
        Self {
            vpt_num_prompts: prompts,
            ..Self::new(MethodKind::Vpt)
        }
    }

    pub fn with_targets(mut self, targets: impl IntoIterator<Item = LoraTarget>) -> Self {
        self.lora_targets = targets.into_iter().collect();
        self
    }

    pub fn alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MethodKind::Lora => {
                if self.lora_rank == 0 {
                    return Err(Error::Config("LoRA rank must be at least 1".into()));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::Config(
                        "LoRA needs at least one target projection".into(),
                    ));
                }
                if !self.alpha().is_finite() {
                    return Err(Error::Config("LoRA alpha must be finite".into()));
                }
            }
            MethodKind::Adapters if self.adapter_reduction == 0 => {
                return Err(Error::Config(
                    "adapter reduction factor must be at least 1".into(),
                ));
            }
            MethodKind::Vpt if self.vpt_layer_prompts.is_none() && self.vpt_start_layer < 2 => {
                return Err(Error::Config(format!(
                    "VPT start layer must be at least 2, got {}",
                    self.vpt_start_layer
                )));
            }
            MethodKind::Ssf if self.ssf_sites.is_empty() => {
                return Err(Error::Config("SSF needs at least one site".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Prompt count at the input of each of `layers` layers.
    pub fn prompt_schedule(&self, layers: usize) -> Result<Vec<usize>> {
        let schedule = match &self.vpt_layer_prompts {
            Some(s) => s.clone(),
            None => {
                if self.vpt_start_layer < 2 || self.vpt_start_layer > layers {
                    return Err(Error::Config(format!(
                        "VPT start layer {} outside [2, {layers}]",
                        self.vpt_start_layer
                    )));
                }
                let mut s = vec![0; layers];
                s[self.vpt_start_layer - 1] = self.vpt_num_prompts;
                s
            }
        };
        if schedule.len() != layers {
            return Err(Error::Config(format!(
                "VPT per-layer prompt counts list {} entries for {layers} layers",
                schedule.len()
            )));
        }
        if schedule[0] != 0 {
            return Err(Error::Config(
                "layer 1 input cannot take prompt tokens".into(),
            ));
        }
        Ok(schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Encoder,
    Decoder,
    Whole,
}

impl Selector {
    pub fn stacks(self) -> &'static [Stack] {
        match self {
            Selector::Encoder => &[Stack::Encoder],
            Selector::Decoder => &[Stack::Decoder],
            Selector::Whole => &[Stack::Encoder, Stack::Decoder],
        }
    }
}

pub fn freeze_all<H: ParamHost + ?Sized>(host: &mut H) {
    for info in host.param_infos() {
        host.set_trainable(&info.path, false)
            .expect("path from the host's own table");
    }
}

pub fn unfreeze_all<H: ParamHost + ?Sized>(host: &mut H) {
    for info in host.param_infos() {
        host.set_trainable(&info.path, true)
            .expect("path from the host's own table");
    }
}

fn in_stack(path: &str, stack: Stack) -> bool {
    path.strip_prefix(stack.prefix())
        .is_some_and(|rest| rest.starts_with('.'))
}

pub fn is_bias(path: &str) -> bool {
    path.ends_with(".bias")
}

pub fn is_norm_affine(path: &str) -> bool {
    path.ends_with(".gamma") || path.ends_with(".beta")
}

/// Applies `method` to the parts of the model picked by `selector`.
///
/// Returns the paths that became trainable: flipped ones for selective
/// methods, newly inserted ones for additive methods.
pub fn apply<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    selector: Selector,
) -> Result<Vec<String>> {
    method.validate()?;
    let mut touched = Vec::new();
    for &stack in selector.stacks() {
        touched.extend(apply_stack(host, method, stack)?);
    }
    Ok(touched)
}

fn apply_stack<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    stack: Stack,
) -> Result<Vec<String>> {
    match method.kind {
        MethodKind::LayerNormTune => unfreeze_matching(host, stack, is_norm_affine),
        MethodKind::BitFit => unfreeze_matching(host, stack, is_bias),
        MethodKind::Lora => inject_lora(host, method, stack),
        MethodKind::Adapters => inject_adapters(host, method, stack),
        MethodKind::Ssf => inject_ssf(host, method, stack),
        MethodKind::Vpt => inject_prompts(host, method, stack),
    }
}

fn unfreeze_matching<H: ParamHost + ?Sized>(
    host: &mut H,
    stack: Stack,
    pred: fn(&str) -> bool,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for info in host.param_infos() {
        if in_stack(&info.path, stack) && pred(&info.path) {
            if !info.trainable {
                out.push(info.path.clone());
            }
            host.set_trainable(&info.path, true)?;
        }
    }
    Ok(out)
}

fn is_cnn_decoder<H: ParamHost + ?Sized>(host: &H, stack: Stack) -> bool {
    stack == Stack::Decoder && host.config().variant == Variant::VitCnn
}

fn insert_all<H: ParamHost + ?Sized>(host: &mut H, specs: Vec<ParamSpec>) -> Result<Vec<String>> {
    let paths = specs.iter().map(|s| s.path.clone()).collect();
    for spec in specs {
        host.insert(spec)?;
    }
    Ok(paths)
}

fn inject_lora<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    stack: Stack,
) -> Result<Vec<String>> {
    if host.peft().lora_merged {
        return Err(Error::AlreadyApplied("merge_lora"));
    }
    let cfg = host.config().clone();
    let mut hosts = Vec::new();
    if is_cnn_decoder(host, stack) {
        for j in 0..cfg.decoder_stages() {
            hosts.push((format!("{}.conv", stage_prefix(j)), HostKind::Conv));
        }
    } else {
        for i in 0..cfg.peft_layers(stack) {
            for t in &method.lora_targets {
                hosts.push((
                    format!("{}.attn.{}", stack.block(i), t.proj()),
                    HostKind::Linear,
                ));
            }
        }
    }
    let r = method.lora_rank;
    let mut specs = Vec::new();
    for (path, _) in &hosts {
        if host.peft().lora.contains_key(path) {
            return Err(Error::AlreadyApplied("LoRA"));
        }
        let shape = host
            .shape_of(&format!("{path}.weight"))
            .ok_or_else(|| Error::Contract(format!("LoRA host '{path}' has no weight")))?;
        let d_out = shape[0];
        let d_in: usize = shape[1..].iter().product();
        if r > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {r} exceeds min(d_in, d_out) = {} at '{path}'",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        specs.push(ParamSpec::new(
            format!("{path}.lora_a"),
            [r, d_in],
            Init::Uniform(bound),
        ));
        specs.push(ParamSpec::new(
            format!("{path}.lora_b"),
            [d_out, r],
            Init::Zeros,
        ));
    }
    let paths = insert_all(host, specs)?;
    for (path, kind) in hosts {
        host.peft_mut().lora.insert(
            path,
            LoraSite {
                rank: r,
                alpha: method.alpha(),
                host: kind,
            },
        );
    }
    Ok(paths)
}

fn adapter_specs(path: &str, channels: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{path}.down.weight"),
            [hidden, channels],
            Init::TruncNormal(WEIGHT_STD),
        ),
        ParamSpec::new(format!("{path}.down.bias"), [hidden], Init::Zeros),
        ParamSpec::new(format!("{path}.up.weight"), [channels, hidden], Init::Zeros),
        ParamSpec::new(format!("{path}.up.bias"), [channels], Init::Zeros),
    ]
}

fn inject_adapters<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    stack: Stack,
) -> Result<Vec<String>> {
    let cfg = host.config().clone();
    let rf = method.adapter_reduction;
    let mut sites = Vec::new();
    if is_cnn_decoder(host, stack) {
        for (j, &c) in cfg.decoder_channels.iter().enumerate() {
            sites.push((format!("{}.adapter", stage_prefix(j)), c, HostKind::Conv));
        }
    } else {
        for i in 0..cfg.peft_layers(stack) {
            sites.push((
                format!("{}.adapter", stack.block(i)),
                cfg.embed_dim,
                HostKind::Linear,
            ));
        }
    }
    let mut paths = Vec::new();
    for (path, channels, kind) in sites {
        if host.peft().adapters.contains_key(&path) {
            return Err(Error::AlreadyApplied("adapters"));
        }
        let hidden = (channels / rf).max(1);
        paths.extend(insert_all(host, adapter_specs(&path, channels, hidden))?);
        host.peft_mut()
            .adapters
            .insert(path, AdapterSite { hidden, host: kind });
    }
    Ok(paths)
}

/// SSF sites of a stack as (site path, layer it follows, fold target, channels).
pub fn ssf_sites(
    cfg: &crate::model::ArchConfig,
    stack: Stack,
    placements: &BTreeSet<SsfPlacement>,
) -> Vec<(String, String, SsfTarget, usize)> {
    let mut out = Vec::new();
    if stack == Stack::Decoder && cfg.variant == Variant::VitCnn {
        for (j, &c) in cfg.decoder_channels.iter().enumerate() {
            let p = stage_prefix(j);
            out.push((
                format!("{p}.ssf.up"),
                format!("{p}.up"),
                SsfTarget::ConvTranspose,
                c,
            ));
            out.push((
                format!("{p}.ssf.conv"),
                format!("{p}.conv"),
                SsfTarget::Conv,
                c,
            ));
            out.push((
                format!("{p}.ssf.norm"),
                format!("{p}.norm"),
                SsfTarget::Norm,
                c,
            ));
        }
        out.push((
            "decoder.ssf.head".into(),
            "decoder.head".into(),
            SsfTarget::Conv,
            1,
        ));
        return out;
    }
    let d = cfg.embed_dim;
    for i in 0..cfg.peft_layers(stack) {
        let b = stack.block(i);
        if placements.contains(&SsfPlacement::LayerNorm) {
            out.push((
                format!("{b}.ssf.norm1"),
                format!("{b}.norm1"),
                SsfTarget::Norm,
                d,
            ));
        }
        if placements.contains(&SsfPlacement::Mhsa) {
            out.push((
                format!("{b}.ssf.attn"),
                format!("{b}.attn.out"),
                SsfTarget::Linear,
                d,
            ));
        }
        if placements.contains(&SsfPlacement::LayerNorm) {
            out.push((
                format!("{b}.ssf.norm2"),
                format!("{b}.norm2"),
                SsfTarget::Norm,
                d,
            ));
        }
        if placements.contains(&SsfPlacement::Mlp) {
            out.push((
                format!("{b}.ssf.mlp"),
                format!("{b}.mlp.fc2"),
                SsfTarget::Linear,
                d,
            ));
        }
    }
    out
}

fn inject_ssf<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    stack: Stack,
) -> Result<Vec<String>> {
    if host.peft().ssf_folded {
        return Err(Error::AlreadyApplied("fold_ssf"));
    }
    let cfg = host.config().clone();
    let mut paths = Vec::new();
    for (site, follows, target, c) in ssf_sites(&cfg, stack, &method.ssf_sites) {
        if host.peft().ssf.contains_key(&site) {
            return Err(Error::AlreadyApplied("SSF"));
        }
        paths.extend(insert_all(
            host,
            vec![
                ParamSpec::new(format!("{site}.scale"), [c], Init::Ones),
                ParamSpec::new(format!("{site}.shift"), [c], Init::Zeros),
            ],
        )?);
        host.peft_mut()
            .ssf
            .insert(site, SsfSite { follows, target });
    }
    Ok(paths)
}

fn inject_prompts<H: ParamHost + ?Sized>(
    host: &mut H,
    method: &PeftMethod,
    stack: Stack,
) -> Result<Vec<String>> {
    if is_cnn_decoder(host, stack) {
        return Err(Error::UnsupportedSite(
            "prompt tokens need a transformer stack; the vit-cnn decoder is convolutional".into(),
        ));
    }
    let cfg = host.config().clone();
    let layers = cfg.stack_layers(stack);
    if layers < 2 {
        return Err(Error::Config(format!(
            "VPT needs at least 2 {} layers, found {layers}",
            stack.prefix()
        )));
    }
    if host.peft().prompts.contains_key(&stack) {
        return Err(Error::AlreadyApplied("VPT"));
    }
    let schedule = method.prompt_schedule(layers)?;
    let allowed = cfg.peft_layers(stack);
    if let Some(i) = schedule.iter().rposition(|&p| p > 0) {
        if i >= allowed {
            return Err(Error::Config(format!(
                "prompts at {} layer {} but PEFT modules are limited to the first {allowed} layers",
                stack.prefix(),
                i + 1
            )));
        }
    }
    let specs = schedule
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(i, &p)| {
            ParamSpec::new(
                prompt_path(stack, i),
                [p, cfg.embed_dim],
                Init::TruncNormal(WEIGHT_STD),
            )
        })
        .collect();
    let paths = insert_all(host, specs)?;
    host.peft_mut().prompts.insert(stack, schedule);
    Ok(paths)
}

/// Tokens entering each layer of `stack` when it is fed `base` patch tokens.
pub fn layer_input_tokens(
    state: &PeftState,
    stack: Stack,
    layers: usize,
    base: usize,
) -> Vec<usize> {
    let schedule = state.prompt_schedule(stack);
    let mut n = base;
    (0..layers)
        .map(|i| {
            n += schedule.map_or(0, |s| s[i]);
            n
        })
        .collect()
}
