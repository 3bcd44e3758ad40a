use clap::{Args, Parser, Subcommand};
use gtal_cli::commands;
use gtal_cli::config::resolve_config;
use gtal_cli::CliResult;
use std::path::PathBuf;
use std::process::ExitCode;

/// Cross-distribution temporal action localization on a synthetic benchmark:
/// data generation, base-model training, teacher-student adaptation,
/// inference, evaluation, and diagnostics.
#[derive(Parser)]
#[command(name = "gtal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; omitted = built-in reference config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelDataArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four synthetic dataset splits (source/target x train/test).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base model on the source training split.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt the base model to the unlabeled target training split.
    Adapt {
        #[command(flatten)]
        common: Common,
    },
    /// Localize and score a dataset with a checkpoint; writes predictions and
    /// the mAP report.
    Evaluate {
        #[command(flatten)]
        args: ModelDataArgs,
    },
    /// Classification-accuracy diagnostics and the error-category breakdown.
    Diagnose {
        #[command(flatten)]
        args: ModelDataArgs,
    },
    /// Run the whole pipeline and print the base-SmD / base-CrD / STAT-CrD
    /// summary table.
    Protocol {
        #[command(flatten)]
        common: Common,
    },
    /// Re-run adaptation over a list of refinement factors.
    AblateAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated refinement factors.
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.2,0.4,0.6,0.8,1.0,1.4")]
        alphas: Vec<f64>,
    },
    /// Run the loss-flag grid with and without teacher EMA updates.
    AblateLosses {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_gen_data(&cfg, &common.out)
        }
        Command::TrainBase { common } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_train_base(&cfg, &common.out)
        }
        Command::Adapt { common } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_adapt(&cfg, &common.out)
        }
        Command::Evaluate { args } => {
            let cfg = resolve_config(args.common.config.as_deref(), args.common.seed)?;
            commands::cmd_evaluate(&cfg, &args.common.out, &args.checkpoint, &args.dataset)
        }
        Command::Diagnose { args } => {
            let cfg = resolve_config(args.common.config.as_deref(), args.common.seed)?;
            commands::cmd_diagnose(&cfg, &args.common.out, &args.checkpoint, &args.dataset)
        }
        Command::Protocol { common } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_protocol(&cfg, &common.out).map(|_| ())
        }
        Command::AblateAlpha { common, alphas } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_ablate_alpha(&cfg, &common.out, &alphas)
        }
        Command::AblateLosses { common } => {
            let cfg = resolve_config(common.config.as_deref(), common.seed)?;
            commands::cmd_ablate_losses(&cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
