use std::collections::BTreeSet;

use petite_core::model::{lora_linear, ArchConfig, Model, ModelLayout, ParamHost, Variant};
use petite_core::peft::{
    apply, fold_ssf, freeze_all, merge_lora, LoraTarget, MethodKind, PeftMethod, Selector,
    SsfPlacement,
};
use petite_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 16, 16, 16], |_| rng.random::<f64>())
}

fn frozen(variant: Variant) -> Model {
    let mut m = Model::build(&ArchConfig::desk(variant), 21).unwrap();
    freeze_all(&mut m);
    m
}

fn trainable_set(m: &impl ParamHost) -> BTreeSet<String> {
    m.trainable_paths().into_iter().collect()
}

/// Overwrites every parameter whose path satisfies `pred` with random values
/// around `center`.
fn randomize(model: &mut Model, seed: u64, center: f64, pred: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths: Vec<String> = model
        .parameters()
        .map(|p| p.path.clone())
        .filter(|p| pred(p))
        .collect();
    for path in paths {
        let shape = model.value(&path).unwrap().shape().to_vec();
        let t = Tensor::from_fn(shape, |_| center + rng.random_range(-0.3..0.3));
        model.set_value(&path, t).unwrap();
    }
}

#[test]
fn freeze_all_leaves_nothing_trainable_and_is_idempotent() {
    let mut m = Model::build(&ArchConfig::desk(Variant::VitVit), 0).unwrap();
    freeze_all(&mut m);
    assert_eq!(m.num_trainable(), 0);
    let once: Vec<bool> = m.parameters().map(|p| p.trainable).collect();
    freeze_all(&mut m);
    let twice: Vec<bool> = m.parameters().map(|p| p.trainable).collect();
    assert_eq!(once, twice);
}

#[test]
fn bitfit_unfreezes_exactly_the_biases() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        let mut m = frozen(variant);
        let oracle: BTreeSet<String> = m
            .parameters()
            .map(|p| p.path.clone())
            .filter(|p| p.rsplit('.').next() == Some("bias"))
            .collect();
        let touched = apply(&mut m, &PeftMethod::bitfit(), Selector::Whole).unwrap();
        assert_eq!(trainable_set(&m), oracle);
        assert_eq!(touched.len(), oracle.len());
    }
}

#[test]
fn bitfit_on_seven_bias_model() {
    // One encoder block has 6 linear biases; the patch embedding adds the 7th.
    let mut cfg = ArchConfig::desk(Variant::VitCnn);
    cfg.encoder_layers = 1;
    cfg.skip_layers = vec![1];
    let mut m = Model::build(&cfg, 0).unwrap();
    freeze_all(&mut m);
    apply(&mut m, &PeftMethod::bitfit(), Selector::Encoder).unwrap();
    let got = trainable_set(&m);
    assert_eq!(got.len(), 7);
    assert!(got
        .iter()
        .all(|p| p.ends_with(".bias") && p.starts_with("encoder.")));
}

#[test]
fn layernorm_tuning_selects_norm_affines() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        let mut m = frozen(variant);
        apply(&mut m, &PeftMethod::layer_norm(), Selector::Whole).unwrap();
        let oracle: BTreeSet<String> = m
            .parameters()
            .map(|p| p.path.clone())
            .filter(|p| {
                let parts: Vec<&str> = p.split('.').collect();
                let n = parts.len();
                parts[n - 2].starts_with("norm") && matches!(parts[n - 1], "gamma" | "beta")
            })
            .collect();
        assert_eq!(trainable_set(&m), oracle);
    }
}

#[test]
fn lora_rank_two_on_one_layer_adds_256() {
    let mut cfg = ArchConfig::desk(Variant::VitCnn);
    cfg.encoder_layers = 1;
    cfg.skip_layers = vec![1];
    let mut m = Model::build(&cfg, 0).unwrap();
    freeze_all(&mut m);
    let before = m.num_params();
    apply(&mut m, &PeftMethod::lora(2), Selector::Encoder).unwrap();
    assert_eq!(m.num_params() - before, 256);
    assert_eq!(m.num_trainable(), 256);
}

#[test]
fn lora_qk_is_cheaper_than_qkv() {
    let mut a = ModelLayout::new(&ArchConfig::desk(Variant::VitVit)).unwrap();
    let mut b = a.clone();
    apply(&mut a, &PeftMethod::lora(4), Selector::Whole).unwrap();
    let qkv =
        PeftMethod::lora(4).with_targets([LoraTarget::Query, LoraTarget::Key, LoraTarget::Value]);
    apply(&mut b, &qkv, Selector::Whole).unwrap();
    let count = |h: &ModelLayout| {
        h.param_infos()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel())
            .sum::<usize>()
    };
    assert!(count(&a) < count(&b));
}

#[test]
fn lora_rank_above_dimensions_is_a_config_error() {
    let mut m = frozen(Variant::VitCnn);
    // Decoder stage 1 conv has 8 output channels.
    let err = apply(&mut m, &PeftMethod::lora(16), Selector::Decoder).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn ssf_site_count_matches_walk() {
    let mut m = frozen(Variant::VitCnn);
    let before = m.num_params();
    let new = apply(&mut m, &PeftMethod::ssf(), Selector::Encoder).unwrap();
    // Walk blocks: two norms, attention output, MLP output.
    let d = 32;
    let mut sites = 0;
    for _block in 0..4 {
        for _site in ["norm1", "attn", "norm2", "mlp"] {
            sites += 1;
        }
    }
    assert_eq!(m.num_params() - before, sites * 2 * d);
    assert_eq!(new.len(), sites * 2);

    let mut only_attn = PeftMethod::ssf();
    only_attn.ssf_sites = [SsfPlacement::Mhsa].into();
    let mut m = frozen(Variant::VitCnn);
    apply(&mut m, &only_attn, Selector::Encoder).unwrap();
    assert_eq!(m.num_trainable(), 4 * 2 * d);
}

#[test]
fn vitvit_additive_injection_respects_layer_limits() {
    let mut m = frozen(Variant::VitVit);
    apply(&mut m, &PeftMethod::adapters(8), Selector::Whole).unwrap();
    let adapters: BTreeSet<String> = m.peft().adapters.keys().cloned().collect();
    let expected: BTreeSet<String> = [
        "encoder.blocks.0.adapter",
        "encoder.blocks.1.adapter",
        "encoder.blocks.2.adapter",
        "decoder.blocks.0.adapter",
        "decoder.blocks.1.adapter",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(adapters, expected);
}

#[test]
fn additive_methods_leave_existing_flags_alone() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        for method in [
            PeftMethod::lora(2),
            PeftMethod::adapters(8),
            PeftMethod::ssf(),
        ] {
            let mut m = frozen(variant);
            let base: BTreeSet<String> = m.parameters().map(|p| p.path.clone()).collect();
            let new = apply(&mut m, &method, Selector::Whole).unwrap();
            assert!(new.iter().all(|p| !base.contains(p)));
            assert_eq!(trainable_set(&m), new.iter().cloned().collect());
        }
    }
}

#[test]
fn additive_injection_is_near_identity() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        let base = Model::build(&ArchConfig::desk(variant), 8).unwrap();
        for method in [
            PeftMethod::lora(2),
            PeftMethod::adapters(4),
            PeftMethod::ssf(),
        ] {
            let mut m = base.clone();
            freeze_all(&mut m);
            apply(&mut m, &method, Selector::Whole).unwrap();
            for seed in 0..3 {
                let x = volume(seed);
                let diff = m
                    .forward(&x)
                    .unwrap()
                    .max_abs_diff(&base.forward(&x).unwrap())
                    .unwrap();
                assert!(diff < 1e-12, "{variant:?} {:?}: {diff}", method.kind);
            }
        }
        let mut m = base.clone();
        apply(&mut m, &PeftMethod::vpt(0), Selector::Encoder).unwrap();
        let x = volume(5);
        assert!(m.forward(&x).unwrap().bit_eq(&base.forward(&x).unwrap()));
    }
}

#[test]
fn vpt_restrictions() {
    let mut m = frozen(Variant::VitCnn);
    let err = apply(&mut m, &PeftMethod::vpt(8), Selector::Decoder).unwrap_err();
    assert!(matches!(err, Error::UnsupportedSite(_)));

    let mut cfg = ArchConfig::desk(Variant::VitCnn);
    cfg.encoder_layers = 1;
    cfg.skip_layers = vec![1];
    let mut m = Model::build(&cfg, 0).unwrap();
    let err = apply(&mut m, &PeftMethod::vpt(8), Selector::Encoder).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let mut m = frozen(Variant::VitCnn);
    let mut late = PeftMethod::vpt(8);
    late.vpt_start_layer = 9;
    assert!(matches!(
        apply(&mut m, &late, Selector::Encoder),
        Err(Error::Config(_))
    ));
    late.vpt_start_layer = 1;
    assert!(matches!(
        apply(&mut m, &late, Selector::Encoder),
        Err(Error::Config(_))
    ));
}

#[test]
fn vpt_per_layer_counts_and_decoder_prompts() {
    let mut m = frozen(Variant::VitCnn);
    let mut method = PeftMethod::new(MethodKind::Vpt);
    method.vpt_layer_prompts = Some(vec![0, 8, 32, 0]);
    apply(&mut m, &method, Selector::Encoder).unwrap();
    let counts: Vec<usize> = m
        .encoder_states(&volume(1))
        .unwrap()
        .iter()
        .map(|s| s.shape()[0])
        .collect();
    assert_eq!(counts, vec![64, 72, 104, 104]);
    assert_eq!(m.num_trainable(), 40 * 32);

    let mut g = frozen(Variant::VitVit);
    apply(&mut g, &PeftMethod::vpt(4), Selector::Whole).unwrap();
    assert_eq!(g.forward(&volume(2)).unwrap().shape(), &[1, 16, 16, 16]);
    assert_eq!(g.num_trainable(), 2 * 4 * 32);
}

#[test]
fn lora_forward_unit_construction() {
    // r = 1, A = e_i^T, B = e_j, alpha = r: output gains x_i on channel j.
    let (d_in, d_out, i, j) = (4, 3, 2, 1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([1, d_in], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
    let w = tape.constant(Tensor::from_fn([d_out, d_in], |k| k as f64 * 0.1));
    let bias = tape.constant(Tensor::new([d_out], vec![1.0, 2.0, 3.0]).unwrap());
    let a = tape.constant(Tensor::from_fn([1, d_in], |k| f64::from(u8::from(k == i))));
    let b = tape.constant(Tensor::from_fn([d_out, 1], |k| f64::from(u8::from(k == j))));
    let base = tape.linear(x, w, Some(bias)).unwrap();
    let out = lora_linear(&mut tape, x, w, Some(bias), a, b, 1.0).unwrap();
    let base = tape.value(base).data().to_vec();
    let out = tape.value(out).data().to_vec();
    for k in 0..d_out {
        let expected = base[k] + if k == j { 2.0 } else { 0.0 };
        assert!((out[k] - expected).abs() < 1e-15);
    }
}

#[test]
fn lora_linear_matches_dense_merged_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut rnd =
        |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let (x, w, bias, a, b) = (
        rnd(&[5, 6]),
        rnd(&[4, 6]),
        rnd(&[4]),
        rnd(&[2, 6]),
        rnd(&[4, 2]),
    );
    let s = 0.75;
    let merged = Tensor::from_fn([4, 6], |k| {
        let (o, i) = (k / 6, k % 6);
        w.data()[k]
            + s * (0..2)
                .map(|r| b.data()[o * 2 + r] * a.data()[r * 6 + i])
                .sum::<f64>()
    });
    let mut tape = Tape::new();
    let v: Vec<_> = [&x, &w, &bias, &a, &b, &merged]
        .iter()
        .map(|t| tape.constant((*t).clone()))
        .collect();
    let lora = lora_linear(&mut tape, v[0], v[1], Some(v[2]), v[3], v[4], s).unwrap();
    let dense = tape.linear(v[0], v[5], Some(v[2])).unwrap();
    assert!(tape.value(lora).max_abs_diff(tape.value(dense)).unwrap() < 1e-9);
}

#[test]
fn merge_lora_matches_runtime_and_is_one_shot() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        let mut m = frozen(variant);
        apply(&mut m, &PeftMethod::lora(2), Selector::Whole).unwrap();
        randomize(&mut m, 3, 0.0, |p| {
            p.ends_with(".lora_b") || p.ends_with(".lora_a")
        });
        let runtime = m.clone();
        let before = m.num_params();
        let lora_count = m.num_trainable();
        let removed = merge_lora(&mut m).unwrap();
        assert_eq!(removed, lora_count);
        assert_eq!(before - m.num_params(), lora_count);
        assert_eq!(m.num_trainable(), 0);
        for seed in 0..4 {
            let x = volume(seed);
            let diff = m
                .forward(&x)
                .unwrap()
                .max_abs_diff(&runtime.forward(&x).unwrap())
                .unwrap();
            assert!(diff < 1e-9, "{variant:?}: {diff}");
        }
        assert!(matches!(merge_lora(&mut m), Err(Error::AlreadyApplied(_))));
    }
}

#[test]
fn zero_b_merge_leaves_weights() {
    let mut m = frozen(Variant::VitVit);
    apply(&mut m, &PeftMethod::lora(2), Selector::Encoder).unwrap();
    let w0 = m.value("encoder.blocks.0.attn.q.weight").unwrap().clone();
    merge_lora(&mut m).unwrap();
    assert!(m
        .value("encoder.blocks.0.attn.q.weight")
        .unwrap()
        .bit_eq(&w0));
}

#[test]
fn fold_ssf_matches_runtime_and_is_one_shot() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        let mut m = frozen(variant);
        apply(&mut m, &PeftMethod::ssf(), Selector::Whole).unwrap();
        // LoRA on the same convs exercises the B-row rescaling path.
        if variant == Variant::VitCnn {
            apply(&mut m, &PeftMethod::lora(2), Selector::Decoder).unwrap();
            randomize(&mut m, 4, 0.0, |p| p.ends_with(".lora_b"));
        }
        randomize(&mut m, 5, 1.0, |p| p.ends_with(".scale"));
        randomize(&mut m, 6, 0.0, |p| p.ends_with(".shift"));
        let runtime = m.clone();
        let report = fold_ssf(&mut m).unwrap();
        assert!(report.retained.is_empty());
        assert_eq!(report.folded.len(), runtime.peft().ssf.len());
        assert!(m
            .parameters()
            .all(|p| !p.path.ends_with(".scale") && !p.path.ends_with(".shift")));
        for seed in 0..4 {
            let x = volume(seed);
            let diff = m
                .forward(&x)
                .unwrap()
                .max_abs_diff(&runtime.forward(&x).unwrap())
                .unwrap();
            assert!(diff < 1e-9, "{variant:?}: {diff}");
        }
        assert!(matches!(fold_ssf(&mut m), Err(Error::AlreadyApplied(_))));
    }
}

#[test]
fn identity_fold_is_a_no_op() {
    let mut m = frozen(Variant::VitCnn);
    apply(&mut m, &PeftMethod::ssf(), Selector::Decoder).unwrap();
    let before: Vec<Tensor> = m
        .parameters()
        .filter(|p| !p.path.contains(".ssf."))
        .map(|p| p.value.clone())
        .collect();
    fold_ssf(&mut m).unwrap();
    let after: Vec<Tensor> = m.parameters().map(|p| p.value.clone()).collect();
    assert_eq!(before.len(), after.len());
    assert!(before.iter().zip(&after).all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn double_application_is_rejected() {
    let mut m = frozen(Variant::VitVit);
    apply(&mut m, &PeftMethod::ssf(), Selector::Encoder).unwrap();
    assert!(matches!(
        apply(&mut m, &PeftMethod::ssf(), Selector::Encoder),
        Err(Error::AlreadyApplied(_))
    ));
}

#[test]
fn layout_and_model_agree_after_every_method() {
    for variant in [Variant::VitVit, Variant::VitCnn] {
        for kind in MethodKind::ALL {
            let method = PeftMethod {
                lora_rank: 2,
                ..PeftMethod::new(kind)
            };
            let selector = if kind == MethodKind::Vpt {
                Selector::Encoder
            } else {
                Selector::Whole
            };
            let cfg = ArchConfig::desk(variant);
            let mut m = Model::build(&cfg, 0).unwrap();
            let mut l = ModelLayout::new(&cfg).unwrap();
            freeze_all(&mut m);
            freeze_all(&mut l);
            apply(&mut m, &method, selector).unwrap();
            apply(&mut l, &method, selector).unwrap();
            assert_eq!(m.param_infos(), l.param_infos(), "{variant:?} {kind:?}");
        }
    }
}
