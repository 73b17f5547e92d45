//! Finite-difference gradient suite over every differentiable primitive and a
//! whole forward-backward pass of each model variant.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{gradcheck, weighted_sum, GradcheckOptions};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::Result;
use crate::mix::{compose, MixPlan};
use crate::model::{ArchConfig, Model, Variant};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Probed coordinates per parameter tensor in the whole-model checks.
const MODEL_COORDS: usize = 3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probed: usize,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Adds a primitive with a deliberately flipped gradient, which must fail.
    pub inject_sign_bug: bool,
    /// Skip the whole-model checks.
    pub primitives_only: bool,
}

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: CheckFn,
    opts: GradcheckOptions,
    /// Relative to the largest gradient over all inputs rather than per input.
    /// Model parameters whose gradient is analytically zero (the attention key
    /// bias under softmax shift invariance) would otherwise compare
    /// finite-difference round-off against nothing.
    joint: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Builds `f(inputs)` reduced to a scalar against fixed random weights.
fn case<F>(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    shapes: &[&[usize]],
    out_shape: &[usize],
    f: F,
) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let inputs = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
    let w = rand_tensor(rng, out_shape);
    Case {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, &w)
        }),
        opts: GradcheckOptions::default(),
        joint: false,
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    vec![
        case(rng, "add", &[&[2, 3], &[3]], &[2, 3], |t, v| {
            t.add(v[0], v[1])
        }),
        case(rng, "sub", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| {
            t.sub(v[0], v[1])
        }),
        case(rng, "mul", &[&[2, 3], &[1, 3]], &[2, 3], |t, v| {
            t.mul(v[0], v[1])
        }),
        case(rng, "scale", &[&[4]], &[4], |t, v| Ok(t.scale(v[0], -1.7))),
        case(rng, "matmul", &[&[3, 4], &[4, 2]], &[3, 2], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            rng,
            "matmul_batched",
            &[&[2, 3, 4], &[2, 4, 2]],
            &[2, 3, 2],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(rng, "reshape", &[&[2, 6]], &[3, 4], |t, v| {
            t.reshape(v[0], [3, 4])
        }),
        case(rng, "permute", &[&[2, 3, 4]], &[4, 2, 3], |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        case(rng, "transpose", &[&[2, 5]], &[5, 2], |t, v| {
            t.transpose(v[0])
        }),
        case(rng, "concat", &[&[2, 3], &[2, 2]], &[2, 5], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        case(rng, "slice", &[&[4, 3]], &[2, 3], |t, v| {
            t.slice(v[0], 0, 1, 2)
        }),
        case(rng, "softmax", &[&[2, 5]], &[2, 5], |t, v| {
            Ok(t.softmax(v[0]))
        }),
        case(rng, "gelu", &[&[2, 5]], &[2, 5], |t, v| Ok(t.gelu(v[0]))),
        case(rng, "normalize", &[&[2, 5]], &[2, 5], |t, v| {
            Ok(t.normalize(v[0], 1e-5))
        }),
        case(
            rng,
            "layer_norm",
            &[&[3, 4], &[4], &[4]],
            &[3, 4],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(rng, "linear", &[&[3, 4], &[2, 4], &[2]], &[3, 2], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case(rng, "sum", &[&[2, 3]], &[], |t, v| Ok(t.sum(v[0]))),
        case(rng, "mean", &[&[2, 3]], &[], |t, v| Ok(t.mean(v[0]))),
        case(rng, "mse_loss", &[&[2, 3], &[2, 3]], &[], |t, v| {
            t.mse_loss(v[0], v[1])
        }),
        case(
            rng,
            "conv3d",
            &[&[2, 4, 4, 4], &[3, 2, 3, 3, 3]],
            &[3, 4, 4, 4],
            |t, v| t.conv3d(v[0], v[1], 1, 1),
        ),
        case(
            rng,
            "conv3d_stride2",
            &[&[2, 4, 4, 4], &[3, 2, 2, 2, 2]],
            &[3, 2, 2, 2],
            |t, v| t.conv3d(v[0], v[1], 2, 0),
        ),
        case(
            rng,
            "conv_transpose3d",
            &[&[2, 2, 2, 2], &[2, 3, 2, 2, 2]],
            &[3, 4, 4, 4],
            |t, v| t.conv_transpose3d(v[0], v[1], 2, 0),
        ),
    ]
}

/// `x²` whose recorded gradient has the wrong sign.
fn sign_bug_case(rng: &mut ChaCha8Rng) -> Case {
    case(rng, "sign_bug_fixture", &[&[5]], &[5], |t, v| {
        let value = t.value(v[0]).map(|a| a * a);
        Ok(t.custom(&[v[0]], value, |g, inputs| {
            vec![g.zip_map(inputs[0], |gv, a| -2.0 * a * gv).unwrap()]
        }))
    })
}

/// Configs small enough to probe every parameter tensor in seconds.
pub fn tiny_config(variant: Variant) -> ArchConfig {
    let mut cfg = ArchConfig::desk(variant);
    cfg.volume_size = 8;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.encoder_layers = 2;
    cfg.mlp_ratio = 2;
    match variant {
        Variant::VitVit => {
            cfg.decoder_layers = 1;
            cfg.peft_encoder_layers = None;
            cfg.peft_decoder_layers = None;
        }
        Variant::VitCnn => {
            cfg.decoder_channels = vec![4];
            cfg.skip_layers = vec![1, 2];
        }
    }
    cfg
}

/// The variant's PETITE plan on a tiny model with every parameter (including
/// zero-initialized PEFT factors) randomized, so every hook carries gradient.
fn model_case(rng: &mut ChaCha8Rng, variant: Variant) -> Result<Case> {
    let cfg = tiny_config(variant);
    let mut model = Model::build(&cfg, 11)?;
    compose(&MixPlan::petite(variant), &mut model)?;
    let paths: Vec<String> = model.parameters().map(|p| p.path.clone()).collect();
    for path in &paths {
        let shape = model.value(path)?.shape().to_vec();
        model.set_value(
            path,
            Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5)),
        )?;
    }
    let s = cfg.volume_size;
    let mut inputs: Vec<Tensor> = model.parameters().map(|p| p.value.clone()).collect();
    inputs.push(rand_tensor(rng, &[1, s, s, s]));
    let w = rand_tensor(rng, &[1, s, s, s]);
    let name = match variant {
        Variant::VitVit => "model_vit_vit",
        Variant::VitCnn => "model_vit_cnn",
    };
    Ok(Case {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let bound = model.bind_with(params)?;
            let y = model.forward_var(t, &bound, x[0])?;
            weighted_sum(t, y, &w)
        }),
        opts: GradcheckOptions {
            max_coords: Some(MODEL_COORDS),
            ..GradcheckOptions::default()
        },
        joint: true,
    })
}

fn run_case(c: &Case) -> Result<CheckResult> {
    let start = Instant::now();
    let checks = gradcheck(&c.inputs, &c.f, &c.opts)?;
    let max_rel_err = if c.joint {
        let abs = checks.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
        let scale = checks.iter().map(|r| r.grad_scale).fold(0.0, f64::max);
        abs / scale
    } else {
        checks.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    };
    Ok(CheckResult {
        name: c.name.to_string(),
        max_rel_err,
        probed: checks.iter().map(|r| r.probed).sum(),
        elapsed: start.elapsed(),
    })
}

/// Runs the suite; one result per primitive or model.
pub fn run_gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cases = primitive_cases(&mut rng);
    if opts.inject_sign_bug {
        cases.push(sign_bug_case(&mut rng));
    }
    if !opts.primitives_only {
        cases.push(model_case(&mut rng, Variant::VitVit)?);
        cases.push(model_case(&mut rng, Variant::VitCnn)?);
    }
    cases.iter().map(run_case).collect()
}
