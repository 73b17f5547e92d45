//! Centered finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradient magnitudes below this are treated as this value when forming
/// relative errors, so an all-zero gradient compared to round-off noise is
/// not reported as a 100% error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Denominator of `max_rel_err`.
    pub grad_scale: f64,
    pub probed: usize,
}

/// Compares analytic gradients of `f` at `inputs` with centered differences.
///
/// The error for each input is normwise: the largest absolute discrepancy over
/// probed coordinates divided by the largest gradient magnitude of that input
/// (analytic over all coordinates, numeric over probed ones), floored at
/// [`REL_ERR_FLOOR`].
pub fn gradcheck<F>(inputs: &[Tensor], f: F, opts: &GradcheckOptions) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_abs_err = 0.0f64;
        let mut max_numeric = 0.0f64;
        for &j in &coords {
            let original = input.data()[j];
            current[i].data_mut()[j] = original + opts.step;
            let plus = eval(&current)?;
            current[i].data_mut()[j] = original - opts.step;
            let minus = eval(&current)?;
            current[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_numeric = max_numeric.max(numeric.abs());
            max_abs_err = max_abs_err.max((numeric - analytic[i].data()[j]).abs());
        }
        let scale = analytic[i].max_abs().max(max_numeric).max(REL_ERR_FLOOR);
        checks.push(InputCheck {
            max_abs_err,
            max_rel_err: max_abs_err / scale,
            grad_scale: scale,
            probed: coords.len(),
        });
    }
    Ok(checks)
}

/// `sum(x ⊙ w)` for a fixed weight tensor; gives every output element a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
