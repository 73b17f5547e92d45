//! The two encoder-decoder reconstruction networks.

mod config;
mod forward;
mod host;
mod layout;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ArchConfig, SkipPlan, Stack, Variant};
pub use forward::{lora_linear, patchify, unpatchify, LN_EPS};
pub use host::{ParamHost, ParamInfo};
pub use layout::{base_layout, stage_prefix, Init, ModelLayout, ParamSpec, WEIGHT_STD};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::PeftState;
use layout::param_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub path: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// A network: its configuration, an ordered parameter table, and the PEFT
/// modules attached to it. `forward` is a pure function of these.
#[derive(Clone, Debug)]
pub struct Model {
    config: ArchConfig,
    seed: u64,
    params: IndexMap<String, Parameter>,
    peft: PeftState,
}

pub fn build_model(config: &ArchConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

impl Model {
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = base_layout(config)
            .into_iter()
            .map(|spec| {
                let p = Self::materialize(seed, &spec);
                (spec.path, p)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            peft: PeftState::default(),
        })
    }

    fn materialize(seed: u64, spec: &ParamSpec) -> Parameter {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &spec.path));
        Parameter {
            path: spec.path.clone(),
            value: spec.init.sample(&spec.shape, &mut rng),
            trainable: true,
        }
    }

    /// Rebuilds a model from stored parts (checkpoint loading).
    pub fn from_parts(
        config: ArchConfig,
        seed: u64,
        params: Vec<Parameter>,
        peft: PeftState,
    ) -> Result<Self> {
        config.validate()?;
        let mut table = IndexMap::with_capacity(params.len());
        for p in params {
            if table.contains_key(&p.path) {
                return Err(Error::Contract(format!("duplicate parameter '{}'", p.path)));
            }
            table.insert(p.path.clone(), p);
        }
        Ok(Self {
            config,
            seed,
            params: table,
            peft,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn peft(&self) -> &PeftState {
        &self.peft
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn parameter(&self, path: &str) -> Option<&Parameter> {
        self.params.get(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shapes(path, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn param_mut(&mut self, path: &str) -> Option<&mut Parameter> {
        self.params.get_mut(path)
    }

    pub(crate) fn remove(&mut self, path: &str) -> Result<Parameter> {
        self.params
            .shift_remove(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`: trainable ones as gradient leaves,
    /// frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_inner(tape, true)
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_inner(tape, false)
    }

    /// Binds parameters to caller-supplied vars, one per parameter in model
    /// order. All of them count as trainable.
    pub fn bind_with(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let trainable: Vec<(String, Var)> = self
            .params
            .keys()
            .cloned()
            .zip(vars.iter().copied())
            .collect();
        let vars = trainable.iter().cloned().collect();
        Ok(Bound { vars, trainable })
    }

    fn bind_inner(&self, tape: &mut Tape, grads: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut trainable = Vec::new();
        for p in self.params.values() {
            let requires = grads && p.trainable;
            let v = tape.leaf(p.value.clone(), requires);
            if requires {
                trainable.push((p.path.clone(), v));
            }
            vars.insert(p.path.clone(), v);
        }
        Bound { vars, trainable }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.volume_size;
        if shape != [1, s, s, s] {
            return Err(Error::shapes("model input", shape, &[1, s, s, s]));
        }
        Ok(())
    }

    /// Reconstruction of `x` (`[1, s, s, s]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward_var(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Differentiable forward pass on an existing tape.
    pub fn forward_var(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let states = self.encoder_state_vars(tape, bound, x)?;
        self.forward_from_states(tape, bound, x, &states)
    }

    /// Output token states of every encoder layer, prompt slots included.
    pub fn encoder_states(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let states = self.encoder_state_vars(&mut tape, &bound, xv)?;
        Ok(states.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn encoder_state_vars(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        forward::Net::new(self, bound).encoder(tape, x)
    }

    /// Runs the decoder on precomputed encoder states (one per encoder layer,
    /// as returned by [`encoder_state_vars`](Self::encoder_state_vars)).
    pub fn forward_from_states(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        states: &[Var],
    ) -> Result<Var> {
        if states.len() != self.config.encoder_layers {
            return Err(Error::Contract(format!(
                "expected {} encoder states, got {}",
                self.config.encoder_layers,
                states.len()
            )));
        }
        forward::Net::new(self, bound).decode(tape, x, states)
    }
}

impl ParamHost for Model {
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
            .values()
            .map(|p| ParamInfo {
                path: p.path.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect()
    }

    fn shape_of(&self, path: &str) -> Option<Vec<usize>> {
        self.params.get(path).map(|p| p.value.shape().to_vec())
    }

    fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))?;
        p.trainable = trainable;
        Ok(())
    }

    fn insert(&mut self, spec: ParamSpec) -> Result<()> {
        if self.params.contains_key(&spec.path) {
            return Err(Error::Contract(format!(
                "parameter '{}' already exists",
                spec.path
            )));
        }
        let p = Self::materialize(self.seed, &spec);
        self.params.insert(spec.path, p);
        Ok(())
    }
}

/// Tape handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{path}' is not bound")))
    }

    /// Trainable parameters in model order.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }
}
