mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use commands::{AblationCases, ForecastArgs, TrainArgs};
use config::RunConfig;

/// Time-series forecaster with in-context examples.
#[derive(Debug, Parser)]
#[command(name = "tsicf", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured worker thread count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic series and disambiguation tasks to <out>/data.
    GenData,
    /// Train from scratch, or continue from a checkpoint with multi-example
    /// contexts.
    Train {
        /// Checkpoint of a finished single-window run.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Continue from the latest interval checkpoint under <out>.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast one history, optionally with in-context examples.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV or JSONL file holding exactly one series.
        #[arg(long)]
        history: PathBuf,
        /// CSV or JSONL file of example series, in context order.
        #[arg(long)]
        examples: Option<PathBuf>,
        /// Forecast length; defaults to the model's output block.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Rolling-origin evaluation of the configured tasks.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["naive"], conflicts_with = "checkpoint")]
        baseline: Option<String>,
    },
    /// Error as a function of the number of in-context examples.
    Ablate {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["naive"], conflicts_with = "checkpoint")]
        baseline: Option<String>,
        /// Comma-separated example counts, ascending.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "suite")]
        on: AblationCases,
    },
}

const VALIDATION: u8 = 2;
const RUNTIME: u8 = 3;

fn load_config(cli: &Cli) -> tsicf::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    if let Command::Ablate { ks: Some(ks), .. } = &cli.command {
        cfg.ablation.ks = ks.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> tsicf::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            commands::gen_data(&cfg)?;
        }
        Command::Train { init_from, resume } => {
            commands::train(
                &cfg,
                &TrainArgs {
                    init_from: init_from.as_deref(),
                    resume: *resume,
                },
            )?;
        }
        Command::Forecast {
            checkpoint,
            history,
            examples,
            horizon,
        } => {
            let (csv, layout) = commands::forecast_cmd(
                &cfg.out,
                &ForecastArgs {
                    checkpoint,
                    history,
                    examples: examples.as_deref(),
                    horizon: *horizon,
                },
            )?;
            log::info!("wrote {} and {}", csv.display(), layout.display());
        }
        Command::Eval {
            checkpoint,
            baseline,
        } => {
            let path = commands::eval_cmd(&cfg, checkpoint.as_deref(), baseline.is_some())?;
            log::info!("wrote {}", path.display());
        }
        Command::Ablate {
            checkpoint,
            baseline,
            on,
            ..
        } => {
            let path = commands::ablate_cmd(&cfg, checkpoint.as_deref(), baseline.is_some(), *on)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() {
                VALIDATION
            } else {
                RUNTIME
            })
        }
    }
}
