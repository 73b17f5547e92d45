use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use petite_cli::commands;
use petite_cli::config::ExperimentConfig;
use petite_cli::error::{CliError, EXIT_OK};

/// Parameter-efficient fine-tuning of volumetric reconstruction models
/// across simulated scanners.
#[derive(Debug, Parser)]
#[command(name = "petite", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` of the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: one per CPU).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train on the source scanner.
    Pretrain,
    /// Fine-tune a pre-trained checkpoint on the target scanner with the configured plan.
    Finetune {
        #[arg(long)]
        from: PathBuf,
    },
    /// Score a checkpoint (or the raw short scans) against a dataset directory.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune every Mix-PEFT plan and both baselines, ranked by PSNR.
    Sweep {
        /// Pre-trained checkpoint; pre-trains first when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and both variants.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_sign_bug: bool,
    },
    /// Parameter budgets of every plan, or of one checkpoint.
    Report {
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>, CliError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = load_config(cli)?;
    let out = commands::resolve_out(cli.out.as_deref(), cfg.as_ref());
    let need = || {
        cfg.as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config".into()))
    };
    match &cli.command {
        Command::Pretrain => commands::pretrain(need()?, &out).map(drop),
        Command::Finetune { from } => commands::finetune(need()?, from, &out).map(drop),
        Command::Eval { model, data } => commands::eval(model.as_deref(), data, &out).map(drop),
        Command::Sweep { from } => {
            commands::sweep(need()?, from.as_deref(), &out, cli.threads).map(drop)
        }
        Command::Gradcheck { inject_sign_bug } => commands::gradcheck(&out, *inject_sign_bug),
        Command::Report { from } => commands::report(cfg.as_ref(), from.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
