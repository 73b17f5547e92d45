use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ParamHost};

use super::state::SsfTarget;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FoldReport {
    /// Sites absorbed into the preceding layer.
    pub folded: Vec<String>,
    /// Sites left in place because nothing before them can absorb an affine map.
    pub retained: Vec<String>,
}

/// Multiplies slices of `t` along `axis` by `gamma[c]`.
fn scale_axis(t: &Tensor, axis: usize, gamma: &[f64]) -> Tensor {
    let shape = t.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let c = shape[axis];
    Tensor::from_fn(shape.to_vec(), |i| t.data()[i] * gamma[(i / inner) % c])
}

fn affine(old: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    Tensor::from_fn(old.shape().to_vec(), |i| gamma[i] * old.data()[i] + beta[i])
}

fn fold_site(
    model: &mut Model,
    follows: &str,
    target: SsfTarget,
    gamma: &[f64],
    beta: &[f64],
) -> Result<()> {
    match target {
        SsfTarget::Norm => {
            let g = model.value(&format!("{follows}.gamma"))?.clone();
            let b = model.value(&format!("{follows}.beta"))?.clone();
            let zeros = vec![0.0; gamma.len()];
            model.set_value(&format!("{follows}.gamma"), affine(&g, gamma, &zeros))?;
            model.set_value(&format!("{follows}.beta"), affine(&b, gamma, beta))?;
        }
        SsfTarget::Linear | SsfTarget::Conv | SsfTarget::ConvTranspose => {
            let axis = usize::from(target == SsfTarget::ConvTranspose);
            let wpath = format!("{follows}.weight");
            let w = model.value(&wpath)?.clone();
            model.set_value(&wpath, scale_axis(&w, axis, gamma))?;
            let bpath = format!("{follows}.bias");
            let b = model.value(&bpath)?.clone();
            model.set_value(&bpath, affine(&b, gamma, beta))?;
            if model.peft().lora.contains_key(follows) {
                let lpath = format!("{follows}.lora_b");
                let lb = model.value(&lpath)?.clone();
                model.set_value(&lpath, scale_axis(&lb, 0, gamma))?;
            }
        }
    }
    Ok(())
}

/// Re-parameterizes every SSF site into the layer it follows and removes the
/// scale/shift parameters. The forward function is unchanged.
pub fn fold_ssf(model: &mut Model) -> Result<FoldReport> {
    if model.peft().ssf_folded {
        return Err(Error::AlreadyApplied("fold_ssf"));
    }
    if model.peft().ssf.is_empty() {
        return Err(Error::Contract(
            "fold_ssf: no SSF modules are attached".into(),
        ));
    }
    let sites = std::mem::take(&mut model.peft_mut().ssf);
    let mut report = FoldReport::default();
    let mut kept = BTreeMap::new();
    for (site, info) in sites {
        let absorbable = match info.target {
            SsfTarget::Norm => model.contains(&format!("{}.gamma", info.follows)),
            _ => model.contains(&format!("{}.weight", info.follows)),
        };
        if !absorbable {
            report.retained.push(site.clone());
            kept.insert(site, info);
            continue;
        }
        let gamma = model.remove(&format!("{site}.scale"))?.value;
        let beta = model.remove(&format!("{site}.shift"))?.value;
        fold_site(model, &info.follows, info.target, gamma.data(), beta.data())?;
        report.folded.push(site);
    }
    let state = model.peft_mut();
    state.ssf = kept;
    state.ssf_folded = true;
    Ok(report)
}
