use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::hparams::OptimizerKind;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam / AdamW. `Adam` folds weight decay into the gradient as an L2 term;
/// `AdamW` decays the weights directly before the moment update.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    /// Accumulators of trainable parameters only, created on first update.
    pub moments: IndexMap<String, Moments>,
}

/// Optimizer settings without the accumulators, for checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            kind: self.kind,
            weight_decay: self.weight_decay,
            step: self.step,
        }
    }

    /// Applies one update with `grads` given per parameter path. Paths of
    /// frozen parameters are ignored.
    pub fn apply(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let wd = self.weight_decay;
        for (path, g) in grads {
            let param = model.param_mut(path).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter '{path}'"))
            })?;
            if !param.trainable {
                continue;
            }
            if g.shape() != param.value.shape() {
                return Err(Error::shapes(path, g.shape(), param.value.shape()));
            }
            let n = g.numel();
            let mom = self.moments.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let theta = param.value.data_mut();
            #[allow(clippy::needless_range_loop)]
            for i in 0..n {
                let mut gi = g.data()[i];
                match self.kind {
                    OptimizerKind::Adam => gi += wd * theta[i],
                    OptimizerKind::AdamW => theta[i] -= lr * wd * theta[i],
                }
                mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                theta[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
