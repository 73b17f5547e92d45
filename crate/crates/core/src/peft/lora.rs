use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ParamHost};

/// `scaling · B·A`, shaped `[d_out, d_in]`.
fn delta(a: &Tensor, b: &Tensor, scaling: f64) -> Vec<f64> {
    let (r, d_in) = (a.shape()[0], a.shape()[1]);
    let d_out = b.shape()[0];
    let (a, b) = (a.data(), b.data());
    let mut out = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        let row = &mut out[i * d_in..(i + 1) * d_in];
        for k in 0..r {
            let bik = b[i * r + k] * scaling;
            for (o, &av) in row.iter_mut().zip(&a[k * d_in..(k + 1) * d_in]) {
                *o += bik * av;
            }
        }
    }
    out
}

/// Folds every LoRA update into its host weight and removes the factors.
/// Returns the number of parameters removed.
pub fn merge_lora(model: &mut Model) -> Result<usize> {
    if model.peft().lora_merged {
        return Err(Error::AlreadyApplied("merge_lora"));
    }
    if model.peft().lora.is_empty() {
        return Err(Error::Contract(
            "merge_lora: no LoRA modules are attached".into(),
        ));
    }
    let sites = std::mem::take(&mut model.peft_mut().lora);
    let mut removed = 0;
    for (host, site) in sites {
        let a = model.remove(&format!("{host}.lora_a"))?.value;
        let b = model.remove(&format!("{host}.lora_b"))?.value;
        removed += a.numel() + b.numel();
        let wpath = format!("{host}.weight");
        let w = model.value(&wpath)?;
        let d = delta(&a, &b, site.scaling());
        let merged = Tensor::from_fn(w.shape().to_vec(), |i| w.data()[i] + d[i]);
        model.set_value(&wpath, merged)?;
    }
    model.peft_mut().lora_merged = true;
    Ok(removed)
}
