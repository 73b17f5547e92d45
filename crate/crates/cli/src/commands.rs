use std::path::{Path, PathBuf};

use rayon::prelude::*;

use petite_core::diagnostics::{run_gradcheck_suite, SuiteOptions, GRADCHECK_TOLERANCE};
use petite_core::fsio;
use petite_core::metrics::MetricReport;
use petite_core::mix::{
    count_params, dry_run_count, enumerate_combinations, standard_plans, Baseline, MixPlan,
    ParamReport,
};
use petite_core::model::Model;
use petite_core::scanner::{
    crop_normalize, read_dataset, synthesize, write_dataset, Pair, ScannerProfile,
};
use petite_core::train::{
    finetune_state, load_model, pretrain_state, save_checkpoint, write_history, EpochRecord,
    TrainState,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::table::{fmt_metric, fmt_sci, Table};

pub const CHECKPOINT_FILE: &str = "checkpoint.ptit";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    SourceTrain = 1,
    SourceVal = 2,
    TargetTrain = 3,
    TargetVal = 4,
}

fn split_seed(seed: u64, split: Split) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split as u64)
}

fn samples(
    cfg: &ExperimentConfig,
    profile: &ScannerProfile,
    count: usize,
    split: Split,
) -> Result<Vec<petite_core::scanner::VolumeSample>, CliError> {
    let crop = cfg.arch()?.volume_size;
    Ok(synthesize(
        profile,
        count,
        crop,
        split_seed(cfg.seed, split),
    )?)
}

fn to_pairs(samples: &[petite_core::scanner::VolumeSample]) -> Result<Vec<Pair>, CliError> {
    Ok(samples
        .iter()
        .map(Pair::from_sample)
        .collect::<petite_core::Result<_>>()?)
}

fn history_table(history: &[EpochRecord]) -> Table {
    let mut t = Table::new([
        "epoch",
        "train_loss",
        "val_psnr",
        "val_ssim",
        "val_nrmse",
        "lr",
    ]);
    for r in history {
        t.push(vec![
            r.epoch.to_string(),
            fmt_sci(r.train_loss),
            fmt_metric(r.val_psnr),
            fmt_metric(r.val_ssim),
            fmt_metric(r.val_nrmse),
            fmt_sci(r.lr),
        ]);
    }
    t
}

/// Checkpoint, CSV history and its aligned text twin.
fn write_run(dir: &Path, state: &TrainState) -> Result<(), CliError> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), state)?;
    write_history(&dir.join(HISTORY_FILE), &state.history)?;
    fsio::atomic_write(
        &dir.join("history.txt"),
        history_table(&state.history).to_text().as_bytes(),
    )?;
    Ok(())
}

fn best_record(state: &TrainState) -> Option<&EpochRecord> {
    let epoch = state.best.as_ref()?.epoch;
    state.history.iter().find(|r| r.epoch == epoch)
}

pub fn param_report_table(report: &ParamReport) -> Table {
    let mut t = Table::new(["module", "trainable", "total", "percent"]);
    for (module, c) in &report.per_module {
        let pct = if c.total == 0 {
            0.0
        } else {
            100.0 * c.trainable as f64 / c.total as f64
        };
        t.push(vec![
            module.clone(),
            c.trainable.to_string(),
            c.total.to_string(),
            format!("{pct:.4}"),
        ]);
    }
    t.push(vec![
        "TOTAL".into(),
        report.trainable.to_string(),
        report.total.to_string(),
        format!("{:.4}", report.percent()),
    ]);
    t
}

fn write_param_report(dir: &Path, report: &ParamReport) -> Result<(), CliError> {
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| CliError::Config(format!("param report: {e}")))?;
    fsio::atomic_write(&dir.join("param_report.json"), &json)?;
    param_report_table(report).write(dir, "param_report")
}

pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<TrainState, CliError> {
    let arch = cfg.arch()?;
    let hp = cfg.pretrain_hyperparams()?;
    let src = cfg.source_profile()?;
    let train = to_pairs(&samples(
        cfg,
        &src,
        cfg.scanner.source_train,
        Split::SourceTrain,
    )?)?;
    let val_samples = samples(cfg, &src, cfg.scanner.val, Split::SourceVal)?;
    let val = to_pairs(&val_samples)?;
    let model = Model::build(&arch, cfg.seed)?;
    let state = pretrain_state(model, &train, &val, &hp)?;
    write_run(out, &state)?;
    write_dataset(
        &out.join("data").join("val"),
        &val_samples,
        &src.voxel_spacing,
    )?;
    if let Some(r) = best_record(&state) {
        println!(
            "pretrained {} on scanner {} for {} epochs: best epoch {} PSNR {} SSIM {}",
            arch.variant.name(),
            src.id,
            hp.epochs,
            r.epoch,
            fmt_metric(r.val_psnr),
            fmt_metric(r.val_ssim)
        );
    }
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(state)
}

struct TargetData {
    train: Vec<Pair>,
    val: Vec<Pair>,
    val_samples: Vec<petite_core::scanner::VolumeSample>,
    spacing: [f64; 3],
}

fn target_data(cfg: &ExperimentConfig) -> Result<TargetData, CliError> {
    let tgt = cfg.target_profile()?;
    let train = to_pairs(&samples(
        cfg,
        &tgt,
        cfg.scanner.target_train,
        Split::TargetTrain,
    )?)?;
    let val_samples = samples(cfg, &tgt, cfg.scanner.val, Split::TargetVal)?;
    Ok(TargetData {
        train,
        val: to_pairs(&val_samples)?,
        val_samples,
        spacing: tgt.voxel_spacing,
    })
}

fn finetune_arm(
    cfg: &ExperimentConfig,
    pretrained: &Model,
    plan: &MixPlan,
    data: &TargetData,
    dir: &Path,
) -> Result<TrainState, CliError> {
    let hp = cfg.hyperparams_for(plan)?;
    let state = finetune_state(pretrained.clone(), plan, &data.train, &data.val, &hp)?;
    write_run(dir, &state)?;
    write_param_report(dir, &count_params(&state.model))?;
    Ok(state)
}

pub fn finetune(cfg: &ExperimentConfig, from: &Path, out: &Path) -> Result<TrainState, CliError> {
    cfg.check_cross_scanner()?;
    let plan = cfg.plan()?;
    let pretrained = load_model(from, Some(&cfg.arch()?))?;
    let data = target_data(cfg)?;
    let state = finetune_arm(cfg, &pretrained, &plan, &data, out)?;
    write_dataset(
        &out.join("data").join("val"),
        &data.val_samples,
        &data.spacing,
    )?;
    let report = count_params(&state.model);
    println!(
        "fine-tuned with plan {}: {} of {} parameters trainable ({:.4}%)",
        plan.name,
        report.trainable,
        report.total,
        report.percent()
    );
    if let Some(r) = best_record(&state) {
        println!(
            "best epoch {} PSNR {} SSIM {} NRMSE {}",
            r.epoch,
            fmt_metric(r.val_psnr),
            fmt_metric(r.val_ssim),
            fmt_metric(r.val_nrmse)
        );
    }
    Ok(state)
}

fn metric_table(report: &MetricReport) -> Table {
    let mut t = Table::new(["metric", "value"]);
    t.push(vec!["psnr".into(), fmt_metric(report.psnr)]);
    t.push(vec!["ssim".into(), fmt_metric(report.ssim)]);
    t.push(vec!["nrmse".into(), fmt_metric(report.nrmse)]);
    t.push(vec!["n_samples".into(), report.n_samples.to_string()]);
    t
}

/// Metrics of `model` (or of the short scans themselves when no model is
/// given) against the long scans in `data`.
pub fn eval(model: Option<&Path>, data: &Path, out: &Path) -> Result<MetricReport, CliError> {
    let samples = read_dataset(data)?;
    let model = model.map(|p| load_model(p, None)).transpose()?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        match &model {
            Some(m) => {
                let size = m.config().volume_size;
                let dims = s.short_scan.shape();
                if dims.iter().any(|&d| d < size) {
                    return Err(CliError::Config(format!(
                        "volume {dims:?} is smaller than the model input {size}³"
                    )));
                }
                let s = if dims.iter().all(|&d| d == size) {
                    s.clone()
                } else {
                    crop_normalize(s, size, i as u64)?
                };
                let pair = Pair::from_sample(&s)?;
                preds.push(m.forward(&pair.input)?);
                truths.push(pair.target);
            }
            None => {
                preds.push(s.short_scan.clone());
                truths.push(s.long_scan.clone());
            }
        }
    }
    let report = MetricReport::from_pairs(preds.iter().zip(&truths))?;
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::Config(format!("metric report: {e}")))?;
    fsio::atomic_write(&out.join("eval.json"), &json)?;
    let table = metric_table(&report);
    table.write(out, "eval")?;
    print!("{}", table.to_text());
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub plan: MixPlan,
    pub outcome: Result<ArmResult, String>,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub percent: f64,
    pub best_epoch: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

fn dir_name(plan: &MixPlan) -> String {
    plan.name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// The baselines plus every feasible Mix-PEFT plan of the variant.
pub fn sweep_plans(cfg: &ExperimentConfig) -> Vec<MixPlan> {
    let mut plans = vec![
        MixPlan::baseline(Baseline::NoFt),
        MixPlan::baseline(Baseline::FullFt),
    ];
    plans.extend(enumerate_combinations(cfg.model.variant));
    plans
}

/// Rows ordered by PSNR, best first; failed arms last.
pub fn sort_rows(rows: &mut [SweepRow]) {
    let key = |r: &SweepRow| r.outcome.as_ref().map_or(f64::NEG_INFINITY, |a| a.psnr);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new([
        "plan",
        "encoder",
        "decoder",
        "bitfit",
        "pct_param",
        "psnr",
        "ssim",
        "nrmse",
        "status",
    ]);
    for r in rows {
        let kind = |k: Option<petite_core::peft::MethodKind>| {
            k.map_or("-".to_string(), |k| k.name().to_string())
        };
        let mut row = vec![
            r.plan.name.clone(),
            kind(r.plan.encoder_kind()),
            kind(r.plan.decoder_kind()),
            if r.plan.bitfit_all_layers {
                "yes"
            } else {
                "no"
            }
            .into(),
        ];
        match &r.outcome {
            Ok(a) => row.extend([
                format!("{:.4}", a.percent),
                fmt_metric(a.psnr),
                fmt_metric(a.ssim),
                fmt_metric(a.nrmse),
                "ok".into(),
            ]),
            Err(e) => row.extend([
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                format!("failed: {e}"),
            ]),
        }
        t.push(row);
    }
    t
}

pub fn sweep(
    cfg: &ExperimentConfig,
    from: Option<&Path>,
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>, CliError> {
    cfg.check_cross_scanner()?;
    let pretrained = match from {
        Some(p) => load_model(p, Some(&cfg.arch()?))?,
        None => {
            let dir = out.join("pretrain");
            let state = pretrain(cfg, &dir)?;
            state.best.map(|b| b.model).unwrap_or(state.model)
        }
    };
    let data = target_data(cfg)?;
    write_dataset(
        &out.join("data").join("val"),
        &data.val_samples,
        &data.spacing,
    )?;
    let plans = sweep_plans(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let mut rows: Vec<SweepRow> = pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                let dir = out.join("arms").join(dir_name(plan));
                let outcome = finetune_arm(cfg, &pretrained, plan, &data, &dir)
                    .and_then(|state| {
                        let rec = best_record(&state).ok_or_else(|| {
                            CliError::Config("run finished without a best epoch".into())
                        })?;
                        Ok(ArmResult {
                            percent: count_params(&state.model).percent(),
                            best_epoch: rec.epoch,
                            psnr: rec.val_psnr,
                            ssim: rec.val_ssim,
                            nrmse: rec.val_nrmse,
                        })
                    })
                    .map_err(|e| e.to_string());
                SweepRow {
                    plan: plan.clone(),
                    outcome,
                }
            })
            .collect()
    });
    sort_rows(&mut rows);
    let table = sweep_table(&rows);
    table.write(out, "sweep")?;
    print!("{}", table.to_text());
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(CliError::PartialSweep {
            failed,
            total: rows.len(),
        });
    }
    Ok(rows)
}

pub fn gradcheck(out: &Path, inject_sign_bug: bool) -> Result<(), CliError> {
    let results = run_gradcheck_suite(&SuiteOptions {
        inject_sign_bug,
        primitives_only: false,
    })?;
    let mut t = Table::new(["check", "max_rel_err", "probes", "ms", "status"]);
    for r in &results {
        t.push(vec![
            r.name.clone(),
            fmt_sci(r.max_rel_err),
            r.probed.to_string(),
            format!("{:.1}", r.elapsed.as_secs_f64() * 1e3),
            if r.passed() { "pass" } else { "FAIL" }.into(),
        ]);
    }
    t.write(out, "gradcheck")?;
    print!("{}", t.to_text());
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} checks below {GRADCHECK_TOLERANCE:e}",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        return Err(CliError::Gradcheck {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}

/// Parameter accounting: the budget of every plan on the configured
/// architecture, or the per-module breakdown of a checkpoint.
pub fn report(
    cfg: Option<&ExperimentConfig>,
    from: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let table = match (from, cfg) {
        (Some(path), _) => {
            let model = load_model(path, None)?;
            param_report_table(&count_params(&model))
        }
        (None, Some(cfg)) => {
            let arch = cfg.arch()?;
            let mut plans = standard_plans(arch.variant);
            plans.extend(enumerate_combinations(arch.variant));
            let mut t = Table::new(["plan", "trainable", "total", "pct_param"]);
            for plan in &plans {
                let r = dry_run_count(&arch, plan)?;
                t.push(vec![
                    plan.name.clone(),
                    r.trainable.to_string(),
                    r.total.to_string(),
                    format!("{:.4}", r.percent()),
                ]);
            }
            t
        }
        (None, None) => {
            return Err(CliError::Config(
                "report needs --config or --from <checkpoint>".into(),
            ))
        }
    };
    table.write(out, "report")?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn resolve_out(cli_out: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}
