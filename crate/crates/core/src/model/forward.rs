//! Forward computation shared by both variants, including the PEFT hooks
//! (LoRA, adapters, SSF, prompt tokens) recorded in the model's `PeftState`.

use super::config::{Stack, Variant};
use super::layout::stage_prefix;
use super::{Bound, Model};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::peft::{prompt_path, HostKind};

pub const LN_EPS: f64 = 1e-5;

/// `[1, s, s, s]` volume to `[tokens, p³]` patch rows, patches in raster order.
pub fn patchify(tape: &mut Tape, x: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(x)[1];
    let g = s / patch;
    let r = tape.reshape(x, [g, patch, g, patch, g, patch])?;
    let r = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(r, [g * g * g, patch * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tape: &mut Tape, rows: Var, patch: usize) -> Result<Var> {
    let tokens = tape.shape(rows)[0];
    let g = (tokens as f64).cbrt().round() as usize;
    let r = tape.reshape(rows, [g, g, g, patch, patch, patch])?;
    let r = tape.permute(r, &[0, 3, 1, 4, 2, 5])?;
    let s = g * patch;
    tape.reshape(r, [1, s, s, s])
}

/// `x·Wᵀ + scaling·(x·Aᵀ)·Bᵀ + bias`.
pub fn lora_linear(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scaling: f64,
) -> Result<Var> {
    let base = tape.linear(x, weight, bias)?;
    let low = tape.linear(x, a, None)?;
    let delta = tape.linear(low, b, None)?;
    let delta = tape.scale(delta, scaling);
    tape.add(base, delta)
}

pub(super) struct Net<'a> {
    model: &'a Model,
    bound: &'a Bound,
}

impl<'a> Net<'a> {
    pub(super) fn new(model: &'a Model, bound: &'a Bound) -> Self {
        Self { model, bound }
    }

    fn p(&self, path: &str) -> Result<Var> {
        self.bound.get(path)
    }

    fn linear(&self, tape: &mut Tape, x: Var, host: &str) -> Result<Var> {
        let w = self.p(&format!("{host}.weight"))?;
        let b = self.p(&format!("{host}.bias"))?;
        match self.model.peft.lora.get(host) {
            Some(site) => {
                let a = self.p(&format!("{host}.lora_a"))?;
                let bb = self.p(&format!("{host}.lora_b"))?;
                lora_linear(tape, x, w, Some(b), a, bb, site.scaling())
            }
            None => tape.linear(x, w, Some(b)),
        }
    }

    /// Scale and shift along the channel axis: last axis for tokens
    /// (`[T, d]`), first axis for feature maps (`[c, D, H, W]`).
    fn ssf(&self, tape: &mut Tape, x: Var, site: &str) -> Result<Var> {
        if !self.model.peft.ssf.contains_key(site) {
            return Ok(x);
        }
        let mut scale = self.p(&format!("{site}.scale"))?;
        let mut shift = self.p(&format!("{site}.shift"))?;
        if tape.shape(x).len() == 4 {
            let c = tape.shape(x)[0];
            scale = tape.reshape(scale, [c, 1, 1, 1])?;
            shift = tape.reshape(shift, [c, 1, 1, 1])?;
        }
        let y = tape.mul(x, scale)?;
        tape.add(y, shift)
    }

    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = patchify(tape, x, self.model.config.patch_size)?;
        let tokens = self.linear(tape, rows, "encoder.patch_embed")?;
        let pos = self.p("encoder.pos_embed")?;
        tape.add(tokens, pos)
    }

    fn attention(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let cfg = &self.model.config;
        let (h, hd) = (cfg.num_heads, cfg.head_dim());
        let t = tape.shape(x)[0];
        let heads = |tape: &mut Tape, proj: &str, perm: &[usize]| -> Result<Var> {
            let y = self.linear(tape, x, &format!("{prefix}.attn.{proj}"))?;
            let y = tape.reshape(y, [t, h, hd])?;
            tape.permute(y, perm)
        };
        let q = heads(tape, "q", &[1, 0, 2])?;
        let k = heads(tape, "k", &[1, 2, 0])?;
        let v = heads(tape, "v", &[1, 0, 2])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = tape.softmax(scores);
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, [t, cfg.embed_dim])?;
        self.linear(tape, ctx, &format!("{prefix}.attn.out"))
    }

    fn adapter(&self, tape: &mut Tape, x: Var, path: &str) -> Result<Var> {
        let Some(site) = self.model.peft.adapters.get(path) else {
            return Ok(x);
        };
        match site.host {
            HostKind::Linear => {
                let down = self.linear(tape, x, &format!("{path}.down"))?;
                let act = tape.gelu(down);
                let up = self.linear(tape, act, &format!("{path}.up"))?;
                tape.add(x, up)
            }
            HostKind::Conv => {
                // 1×1×1 convolutions written as channel matmuls on [c, voxels].
                let shape = tape.shape(x).to_vec();
                let c = shape[0];
                let vox = shape[1..].iter().product::<usize>();
                let flat = tape.reshape(x, [c, vox])?;
                let hidden = site.hidden;
                let dw = self.p(&format!("{path}.down.weight"))?;
                let db = self.p(&format!("{path}.down.bias"))?;
                let db = tape.reshape(db, [hidden, 1])?;
                let d = tape.matmul(dw, flat)?;
                let d = tape.add(d, db)?;
                let act = tape.gelu(d);
                let uw = self.p(&format!("{path}.up.weight"))?;
                let ub = self.p(&format!("{path}.up.bias"))?;
                let ub = tape.reshape(ub, [c, 1])?;
                let u = tape.matmul(uw, act)?;
                let u = tape.add(u, ub)?;
                let out = tape.add(flat, u)?;
                tape.reshape(out, shape)
            }
        }
    }

    fn block(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let n1 = tape.layer_norm(
            x,
            self.p(&format!("{prefix}.norm1.gamma"))?,
            self.p(&format!("{prefix}.norm1.beta"))?,
            LN_EPS,
        )?;
        let n1 = self.ssf(tape, n1, &format!("{prefix}.ssf.norm1"))?;
        let o = self.attention(tape, n1, prefix)?;
        let o = self.ssf(tape, o, &format!("{prefix}.ssf.attn"))?;
        let h = tape.add(x, o)?;

        let n2 = tape.layer_norm(
            h,
            self.p(&format!("{prefix}.norm2.gamma"))?,
            self.p(&format!("{prefix}.norm2.beta"))?,
            LN_EPS,
        )?;
        let n2 = self.ssf(tape, n2, &format!("{prefix}.ssf.norm2"))?;
        let f = self.linear(tape, n2, &format!("{prefix}.mlp.fc1"))?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, &format!("{prefix}.mlp.fc2"))?;
        let f = self.ssf(tape, f, &format!("{prefix}.ssf.mlp"))?;
        let f = self.adapter(tape, f, &format!("{prefix}.adapter"))?;
        tape.add(h, f)
    }

    /// Runs a transformer stack, inserting prompt tokens ahead of the input of
    /// each layer that has a nonzero prompt count. Returns every layer's output.
    fn stack(&self, tape: &mut Tape, stack: Stack, mut tokens: Var) -> Result<Vec<Var>> {
        let layers = self.model.config.stack_layers(stack);
        let schedule = self
            .model
            .peft
            .prompt_schedule(stack)
            .map(<[usize]>::to_vec);
        let mut states = Vec::with_capacity(layers);
        for i in 0..layers {
            if schedule.as_ref().is_some_and(|s| s[i] > 0) {
                let prompts = self.p(&prompt_path(stack, i))?;
                tokens = tape.concat(&[prompts, tokens], 0)?;
            }
            tokens = self.block(tape, tokens, &stack.block(i))?;
            states.push(tokens);
        }
        Ok(states)
    }

    /// Drops prompt slots, keeping the trailing patch tokens.
    fn strip(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let t = self.model.config.num_tokens();
        let n = tape.shape(tokens)[0];
        if n == t {
            return Ok(tokens);
        }
        tape.slice(tokens, 0, n - t, t)
    }

    pub(super) fn encoder(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let tokens = self.embed(tape, x)?;
        self.stack(tape, Stack::Encoder, tokens)
    }

    pub(super) fn decode(&self, tape: &mut Tape, x: Var, states: &[Var]) -> Result<Var> {
        let pred = match self.model.config.variant {
            Variant::VitVit => self.vit_decoder(tape, states)?,
            Variant::VitCnn => self.cnn_decoder(tape, states)?,
        };
        tape.add(x, pred)
    }

    fn vit_decoder(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let last = *states.last().expect("at least one encoder layer");
        let tokens = self.strip(tape, last)?;
        let dec = self.stack(tape, Stack::Decoder, tokens)?;
        let out = self.strip(tape, *dec.last().expect("at least one decoder layer"))?;
        let rows = self.linear(tape, out, "decoder.unembed")?;
        unpatchify(tape, rows, self.model.config.patch_size)
    }

    /// Patch tokens of an encoder state as a `[d, g, g, g]` feature grid.
    fn grid(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let g = cfg.grid();
        let tokens = self.strip(tape, state)?;
        let t = tape.transpose(tokens)?;
        tape.reshape(t, [cfg.embed_dim, g, g, g])
    }

    fn conv_bias(&self, tape: &mut Tape, y: Var, bias_path: &str) -> Result<Var> {
        let c = tape.shape(y)[0];
        let b = self.p(bias_path)?;
        let b = tape.reshape(b, [c, 1, 1, 1])?;
        tape.add(y, b)
    }

    /// Convolution weight with any LoRA update folded in: `W + s·reshape(B·A)`.
    fn conv_weight(&self, tape: &mut Tape, host: &str) -> Result<Var> {
        let w = self.p(&format!("{host}.weight"))?;
        let Some(site) = self.model.peft.lora.get(host) else {
            return Ok(w);
        };
        let a = self.p(&format!("{host}.lora_a"))?;
        let b = self.p(&format!("{host}.lora_b"))?;
        let ba = tape.matmul(b, a)?;
        let shape = tape.shape(w).to_vec();
        let delta = tape.reshape(ba, shape)?;
        let delta = tape.scale(delta, site.scaling());
        tape.add(w, delta)
    }

    fn channel_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = shape[0];
        let vox = shape[1..].iter().product::<usize>();
        let flat = tape.reshape(x, [c, vox])?;
        let n = tape.normalize(flat, LN_EPS);
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let gamma = tape.reshape(gamma, [c, 1])?;
        let beta = tape.reshape(beta, [c, 1])?;
        let n = tape.mul(n, gamma)?;
        let n = tape.add(n, beta)?;
        tape.reshape(n, shape)
    }

    fn cnn_decoder(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let cfg = &self.model.config;
        let plan = cfg.skip_plan();
        let mut cur = self.grid(tape, states[plan.bottleneck - 1])?;
        for (j, layers) in plan.per_stage.iter().enumerate() {
            let prefix = stage_prefix(j);
            let w = self.p(&format!("{prefix}.up.weight"))?;
            let up = tape.conv_transpose3d(cur, w, 2, 0)?;
            let up = self.conv_bias(tape, up, &format!("{prefix}.up.bias"))?;
            let mut y = self.ssf(tape, up, &format!("{prefix}.ssf.up"))?;
            let factor = 1usize << (j + 1);
            for layer in layers {
                let skip = self.grid(tape, states[layer - 1])?;
                let w = self.p(&format!("{prefix}.skips.{layer}.weight"))?;
                let s = tape.conv_transpose3d(skip, w, factor, 0)?;
                let s = self.conv_bias(tape, s, &format!("{prefix}.skips.{layer}.bias"))?;
                y = tape.add(y, s)?;
            }
            let host = format!("{prefix}.conv");
            let w = self.conv_weight(tape, &host)?;
            let c = tape.conv3d(y, w, 1, 1)?;
            let c = self.conv_bias(tape, c, &format!("{host}.bias"))?;
            let c = self.ssf(tape, c, &format!("{prefix}.ssf.conv"))?;
            let n = self.channel_norm(tape, c, &format!("{prefix}.norm"))?;
            let n = self.ssf(tape, n, &format!("{prefix}.ssf.norm"))?;
            let a = tape.gelu(n);
            cur = self.adapter(tape, a, &format!("{prefix}.adapter"))?;
        }
        let w = self.p("decoder.head.weight")?;
        let head = tape.conv3d(cur, w, 1, 0)?;
        let head = self.conv_bias(tape, head, "decoder.head.bias")?;
        self.ssf(tape, head, "decoder.ssf.head")
    }
}
