//! Acceptance suite. Prints one PASS/FAIL line per criterion with the pinned
//! tolerance, then fails if any criterion failed.
//!
//! `cargo test -p petite-core --test acceptance -- --nocapture`

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use petite_core::diagnostics::{run_gradcheck_suite, SuiteOptions};
use petite_core::metrics::{nrmse, psnr, ssim, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use petite_core::mix::{
    compose, count_params, dry_run_count, enumerate_combinations, standard_plans, Baseline, MixPlan,
};
use petite_core::model::{ArchConfig, Model, Variant};
use petite_core::peft::{apply, fold_ssf, merge_lora, MethodKind, PeftMethod, Selector};
use petite_core::scanner::{
    generate_phantom, load_volume, profile, profiles, psf_blur, save_volume, simulate_scan,
    synthesize, Pair, FRAMES,
};
use petite_core::train::{
    decode_checkpoint, encode_checkpoint, evaluate, frozen_digest, history_csv, load_checkpoint,
    params_digest, peft_finetune, pretrain, save_checkpoint, Hyperparams, TrainState,
};
use petite_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const VARIANTS: [Variant; 2] = [Variant::VitVit, Variant::VitCnn];

fn pairs(scanner: u8, n: usize, seed: u64) -> Vec<Pair> {
    let p = profile(scanner).unwrap().mini();
    synthesize(&p, n, 16, seed)
        .unwrap()
        .iter()
        .map(|s| Pair::from_sample(s).unwrap())
        .collect()
}

fn random_volume(rng: &mut ChaCha8Rng, s: usize) -> Tensor {
    Tensor::from_fn([1, s, s, s], |_| rng.random::<f64>())
}

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

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = run_gradcheck_suite(&SuiteOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let models = results
        .iter()
        .filter(|r| r.name.starts_with("model_"))
        .count();
    verdict(
        results.iter().all(|r| r.passed()) && models == 2 && elapsed < Duration::from_secs(120),
        format!(
            "{} checks ({models} whole-model), worst {} {:.2e} < 1e-6, {:.1}s < 120s",
            results.len(),
            worst.name,
            worst.max_rel_err,
            elapsed.as_secs_f64()
        ),
    )
}

fn freeze_discipline() -> Verdict {
    let train = pairs(2, 2, 41);
    let val = pairs(2, 1, 42);
    let mut plans: Vec<(Variant, MixPlan)> = Vec::new();
    for v in VARIANTS {
        for k in MethodKind::ALL {
            plans.push((v, MixPlan::single(k, v)));
        }
        plans.push((v, MixPlan::petite(v)));
    }
    let mut failures = Vec::new();
    for (v, plan) in &plans {
        let mut model = Model::build(&ArchConfig::desk(*v), 17).unwrap();
        compose(plan, &mut model).unwrap();
        let frozen_before = frozen_digest(&model);
        let trainable_before = params_digest(&model, |p| p.trainable);
        let mut hp = Hyperparams::for_plan(*v, plan, true);
        hp.epochs = 10;
        hp.batch_size = 2;
        let mut state = TrainState::new(model, hp, Some(plan.clone())).unwrap();
        for _ in 0..10 {
            state.step(&train, &val).unwrap();
        }
        let frozen_ok = frozen_digest(&state.model) == frozen_before;
        let moved = params_digest(&state.model, |p| p.trainable) != trainable_before;
        if !(frozen_ok && moved) {
            failures.push(format!("{}/{}", v.name(), plan.name));
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} plans x 10 steps, frozen SHA-256 unchanged, trainable moved; failures {failures:?}",
            plans.len()
        ),
    )
}

fn near_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut vpt_exact = true;
    for v in VARIANTS {
        let base = Model::build(&ArchConfig::desk(v), 23).unwrap();
        let x = random_volume(&mut rng, 16);
        let y0 = base.forward(&x).unwrap();
        for k in [MethodKind::Lora, MethodKind::Adapters, MethodKind::Ssf] {
            let mut m = base.clone();
            compose(&MixPlan::single(k, v), &mut m).unwrap();
            worst = worst.max(m.forward(&x).unwrap().max_abs_diff(&y0).unwrap());
        }
        let mut m = base.clone();
        apply(&mut m, &PeftMethod::vpt(0), Selector::Encoder).unwrap();
        vpt_exact &= m.forward(&x).unwrap().bit_eq(&y0);
    }
    verdict(
        worst < 1e-12 && vpt_exact,
        format!(
            "LoRA/Adapters/SSF max |dy| {worst:.2e} < 1e-12; VPT p=0 bitwise equal: {vpt_exact}"
        ),
    )
}

fn equivalence_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut lora_err, mut ssf_err) = (0.0f64, 0.0f64);
    for v in VARIANTS {
        let base = Model::build(&ArchConfig::desk(v), 31).unwrap();

        let mut runtime = base.clone();
        apply(&mut runtime, &PeftMethod::lora(4), Selector::Whole).unwrap();
        randomize(&mut runtime, 1, 0.0, |p| {
            p.ends_with(".lora_a") || p.ends_with(".lora_b")
        });
        let mut merged = runtime.clone();
        merge_lora(&mut merged).unwrap();

        let mut ssf_runtime = base.clone();
        apply(&mut ssf_runtime, &PeftMethod::ssf(), Selector::Whole).unwrap();
        randomize(&mut ssf_runtime, 2, 1.0, |p| p.ends_with(".scale"));
        randomize(&mut ssf_runtime, 3, 0.0, |p| p.ends_with(".shift"));
        let mut folded = ssf_runtime.clone();
        fold_ssf(&mut folded).unwrap();

        for _ in 0..20 {
            let x = random_volume(&mut rng, 16);
            let d = merged.forward(&x).unwrap();
            lora_err = lora_err.max(d.max_abs_diff(&runtime.forward(&x).unwrap()).unwrap());
            let d = folded.forward(&x).unwrap();
            ssf_err = ssf_err.max(d.max_abs_diff(&ssf_runtime.forward(&x).unwrap()).unwrap());
        }
    }
    verdict(
        lora_err < 1e-9 && ssf_err < 1e-9,
        format!("20 inputs x 2 variants: merge_lora {lora_err:.2e}, fold_ssf {ssf_err:.2e} < 1e-9"),
    )
}

fn enumeration() -> Verdict {
    use MethodKind::*;
    // Encoder/decoder pairs listed in the published feasibility tables.
    let published_vitvit = [
        (Lora, Adapters),
        (Lora, Ssf),
        (Lora, Vpt),
        (Adapters, Lora),
        (Adapters, Ssf),
        (Adapters, Vpt),
        (Vpt, Lora),
        (Vpt, Adapters),
        (Vpt, Ssf),
        (Ssf, Lora),
        (Ssf, Adapters),
        (Ssf, Vpt),
    ];
    let published_vitcnn = [
        (Lora, Adapters),
        (Lora, Ssf),
        (Adapters, Lora),
        (Adapters, Ssf),
        (Vpt, Lora),
        (Vpt, Adapters),
        (Vpt, Ssf),
        (Ssf, Adapters),
        (Ssf, Lora),
    ];
    let rows = |v: Variant| -> BTreeSet<(String, String)> {
        enumerate_combinations(v)
            .iter()
            .map(|p| {
                (
                    p.encoder_kind().unwrap().name().to_string(),
                    p.decoder_kind().unwrap().name().to_string(),
                )
            })
            .collect()
    };
    let expect = |pairs: &[(MethodKind, MethodKind)]| -> BTreeSet<(String, String)> {
        pairs
            .iter()
            .map(|(e, d)| (e.name().to_string(), d.name().to_string()))
            .collect()
    };
    let n_vit = enumerate_combinations(Variant::VitVit).len();
    let n_cnn = enumerate_combinations(Variant::VitCnn).len();
    let bitfit = VARIANTS
        .iter()
        .flat_map(|&v| enumerate_combinations(v))
        .all(|p| p.bitfit_all_layers);
    let sets = rows(Variant::VitVit) == expect(&published_vitvit)
        && rows(Variant::VitCnn) == expect(&published_vitcnn);
    verdict(
        n_vit == 12 && n_cnn == 9 && n_vit + n_cnn == 21 && sets && bitfit,
        format!(
            "vit-vit {n_vit} = 12, vit-cnn {n_cnn} = 9, total {} = 21, row sets match: {sets}",
            n_vit + n_cnn
        ),
    )
}

fn accounting() -> Verdict {
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for v in VARIANTS {
        let cfg = ArchConfig::desk(v);
        let mut plans = standard_plans(v);
        plans.extend(enumerate_combinations(v));
        for plan in &plans {
            let mut model = Model::build(&cfg, 5).unwrap();
            let report = compose(plan, &mut model).unwrap();
            let (mut total, mut trainable) = (0usize, 0usize);
            for p in model.parameters() {
                let n: usize = p.value.shape().iter().product();
                total += n;
                if p.trainable {
                    trainable += n;
                }
            }
            let per_module: usize = report.per_module.values().map(|m| m.trainable).sum();
            let dry = dry_run_count(&cfg, plan).unwrap();
            if (report.total, report.trainable) != (total, trainable)
                || per_module != trainable
                || dry != count_params(&model)
            {
                mismatches.push(format!("{}/{}", v.name(), plan.name));
            }
            checked += 1;
        }
    }
    let mut worst_single = (String::new(), 0.0f64);
    let mut petite = Vec::new();
    for v in VARIANTS {
        let cfg = ArchConfig::paper_like(v);
        for k in MethodKind::ALL {
            let pct = dry_run_count(&cfg, &MixPlan::single(k, v))
                .unwrap()
                .percent();
            if pct > worst_single.1 {
                worst_single = (format!("{}/{}", v.name(), k.name()), pct);
            }
        }
        petite.push(dry_run_count(&cfg, &MixPlan::petite(v)).unwrap().percent());
    }
    let pass = mismatches.is_empty() && worst_single.1 < 1.5 && petite.iter().all(|&p| p < 1.5);
    verdict(
        pass,
        format!(
            "{checked} plans recounted, mismatches {mismatches:?}; paper-like worst single {} {:.3}% < 1.5%, PETITE vit-vit {:.3}% / vit-cnn {:.3}% < 1.5%",
            worst_single.0, worst_single.1, petite[0], petite[1]
        ),
    )
}

fn cross_scanner_experiment() -> Verdict {
    let start = Instant::now();
    let v = Variant::VitCnn;
    let src_train = pairs(1, 20, 100);
    let src_val = pairs(1, 4, 101);
    let tgt_train = pairs(4, 10, 200);
    let tgt_val = pairs(4, 4, 201);
    let tgt_test = pairs(4, 8, 202);

    let mut hp = Hyperparams::pretrain(v, true);
    hp.epochs = 100;
    let base = Model::build(&ArchConfig::desk(v), 0).unwrap();
    let pre = pretrain(base, &src_train, &src_val, &hp).unwrap();

    let mut scores = Vec::new();
    let mut petite_fraction = 0.0;
    for plan in [
        MixPlan::baseline(Baseline::NoFt),
        MixPlan::baseline(Baseline::FullFt),
        MixPlan::single(MethodKind::BitFit, v),
        MixPlan::petite(v),
    ] {
        let mut hp = Hyperparams::for_plan(v, &plan, true);
        hp.epochs = 50;
        let out = peft_finetune(pre.model.clone(), &plan, &tgt_train, &tgt_val, &hp).unwrap();
        let report = evaluate(&out.model, &tgt_test).unwrap();
        if plan.name == "petite-vitcnn" {
            petite_fraction = count_params(&out.model).fraction;
        }
        scores.push((plan.name.clone(), report.psnr));
    }
    let get = |name: &str| scores.iter().find(|s| s.0 == name).unwrap().1;
    let (no_ft, full_ft, bitfit, petite) = (
        get("no-ft"),
        get("full-ft"),
        get("bitfit"),
        get("petite-vitcnn"),
    );
    let elapsed = start.elapsed();
    verdict(
        petite > no_ft
            && petite_fraction < 0.05
            && full_ft >= petite - 0.5
            && elapsed < Duration::from_secs(600),
        format!(
            "test PSNR no-ft {no_ft:.3}, full-ft {full_ft:.3}, bitfit {bitfit:.3}, PETITE-II {petite:.3} dB; \
             PETITE-II > no-ft, full-ft >= PETITE-II - 0.5 dB, trainable {:.3}% < 5%, {:.0}s < 600s",
            100.0 * petite_fraction,
            elapsed.as_secs_f64()
        ),
    )
}

fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (d, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = SSIM_WINDOW;
    let at = |t: &Tensor, i: usize, j: usize, k: usize| t.data()[(i * h + j) * w + k];
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..=d - n {
        for j in 0..=h - n {
            for k in 0..=w - n {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in 0..n {
                    for dj in 0..n {
                        for dk in 0..n {
                            xs.push(at(a, i + di, j + dj, k + dk));
                            ys.push(at(b, i + di, j + dj, k + dk));
                        }
                    }
                }
                let m = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / m;
                let my = ys.iter().sum::<f64>() / m;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / m;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / m;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / m;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn metric_cases() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let gt = Tensor::from_fn([10, 9, 8], |_| rng.random::<f64>() * 0.8);
    let shifted = gt.map(|v| v + 0.1);
    let psnr_err = (psnr(&shifted, &gt, 1.0).unwrap() - 20.0).abs();
    let same_ssim = ssim(&gt, &gt).unwrap();
    let same_nrmse = nrmse(&gt, &gt).unwrap();
    let noisy = gt.map(|v| v + 0.05 * (v * 37.0).sin());
    let ssim_err = (ssim(&noisy, &gt).unwrap() - naive_ssim(&noisy, &gt)).abs();
    verdict(
        psnr_err < 1e-9 && same_ssim == 1.0 && same_nrmse == 0.0 && ssim_err < 1e-9,
        format!(
            "|PSNR-20| {psnr_err:.1e} < 1e-9; identical SSIM {same_ssim}, NRMSE {same_nrmse}; |SSIM-naive| {ssim_err:.1e} < 1e-9"
        ),
    )
}

fn frame_averaging() -> Verdict {
    let mut worst_gap = f64::INFINITY;
    let mut lines = Vec::new();
    for p in profiles() {
        let p = p.mini();
        let (mut short, mut long) = (0.0, 0.0);
        for seed in 0..20u64 {
            let phantom = generate_phantom(seed, p.resolution).unwrap();
            let clean = psf_blur(&phantom, p.psf_sigma).unwrap();
            let s = simulate_scan(&phantom, &p, FRAMES, seed, 1000 + seed).unwrap();
            short += psnr(&s.short_scan, &clean, 1.0).unwrap() / 20.0;
            long += psnr(&s.long_scan, &clean, 1.0).unwrap() / 20.0;
        }
        worst_gap = worst_gap.min(long - short);
        lines.push(format!("s{} {short:.1}->{long:.1}", p.id));
    }
    verdict(
        worst_gap > 0.0,
        format!(
            "mean PSNR short->long over 20 seeds: {}; smallest gain {worst_gap:.2} dB > 0",
            lines.join(", ")
        ),
    )
}

fn determinism_and_persistence() -> Verdict {
    let train = pairs(3, 4, 300);
    let val = pairs(3, 2, 301);
    let cfg = ArchConfig::desk(Variant::VitCnn);
    let mut hp = Hyperparams::pretrain(Variant::VitCnn, true);
    hp.epochs = 3;
    hp.batch_size = 2;

    let run = || {
        let out = pretrain(Model::build(&cfg, 8).unwrap(), &train, &val, &hp).unwrap();
        history_csv(&out.history).unwrap()
    };
    let csv_equal = run() == run();

    let plan = MixPlan::petite(Variant::VitCnn);
    let mut model = Model::build(&cfg, 8).unwrap();
    compose(&plan, &mut model).unwrap();
    let mut fhp = Hyperparams::for_plan(Variant::VitCnn, &plan, true);
    fhp.epochs = 5;
    fhp.batch_size = 2;
    // 2 steps per epoch, 10 in total; resume after 5.
    let mut continuous = TrainState::new(model.clone(), fhp.clone(), Some(plan.clone())).unwrap();
    continuous.run(&train, &val).unwrap();
    let mut first = TrainState::new(model, fhp, Some(plan)).unwrap();
    for _ in 0..5 {
        first.step(&train, &val).unwrap();
    }
    let mut resumed = decode_checkpoint(&encode_checkpoint(&first).unwrap()).unwrap();
    let mut resumed_steps = 0;
    while !resumed.is_finished(train.len()) {
        resumed.step(&train, &val).unwrap();
        resumed_steps += 1;
    }
    let resume_equal = resumed_steps == 5
        && encode_checkpoint(&resumed).unwrap() == encode_checkpoint(&continuous).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let vol = synthesize(&profile(5).unwrap().mini(), 1, 16, 9).unwrap();
    let vpath = dir.path().join("scan.vol");
    save_volume(&vpath, &vol[0].short_scan, &[2.0, 2.0, 2.4], 5).unwrap();
    let volume_equal = load_volume(&vpath).unwrap().0.bit_eq(&vol[0].short_scan);
    let cpath = dir.path().join("run.ptit");
    save_checkpoint(&cpath, &continuous).unwrap();
    let bytes = std::fs::read(&cpath).unwrap();
    let checkpoint_equal = encode_checkpoint(&load_checkpoint(&cpath).unwrap()).unwrap() == bytes;

    verdict(
        csv_equal && resume_equal && volume_equal && checkpoint_equal,
        format!(
            "history CSV identical: {csv_equal}; 5+5-step resume bitwise: {resume_equal}; volume round trip: {volume_equal}; checkpoint round trip: {checkpoint_equal}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("freeze discipline", freeze_discipline),
        ("near-identity injection", near_identity),
        ("equivalence oracles", equivalence_oracles),
        ("enumeration", enumeration),
        ("accounting", accounting),
        ("cross-scanner experiment", cross_scanner_experiment),
        ("metric analytic cases", metric_cases),
        ("frame-averaging physics", frame_averaging),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", i + 1, v.detail);
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
