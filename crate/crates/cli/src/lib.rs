//! Experiment runner for two-stage and variational two-stage training.
//!
//! `train` writes checkpoints, `eval` turns checkpoints into metric CSVs and
//! `report` aggregates those CSVs over seeds.

pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod report;
pub mod train;

use std::path::PathBuf;

use calib2stage::StageTag;
use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

pub const THREADS_ENV: &str = "CALIB2STAGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "calib2stage", version, about = "Two-stage calibrated classifier experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage for every configured seed (and latent width).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// stage1, tst, vtst, e2e or var_e2e
        #[arg(long)]
        stage: String,
    },
    /// Evaluate every checkpoint the config describes that exists on disk.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated MC sample counts; defaults to the config's m_values.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
    },
    /// Aggregate eval CSVs into report.csv and report.txt.
    Report {
        #[arg(long)]
        inputs: String,
        /// Defaults to the directory of the first input.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Executes a command and returns one summary line per output.
pub fn run(cli: Cli) -> CliResult<Vec<String>> {
    let mut lines = Vec::new();
    match cli.command {
        Command::Train { config, stage } => {
            let stage: StageTag = stage
                .parse()
                .map_err(|e: calib2stage::Error| CliError::Config(format!("--stage: {e}")))?;
            let cfg = ExperimentConfig::load(&config)?;
            for t in train::cmd_train(&cfg, stage)? {
                lines.push(format!(
                    "{}: best epoch {} val loss {}",
                    t.run.stem(),
                    t.best_epoch,
                    format::sig6(t.best_val_loss)
                ));
            }
        }
        Command::Eval { config, m } => {
            let cfg = ExperimentConfig::load(&config)?;
            for out in eval::cmd_eval(&cfg, m)? {
                lines.push(format!("{}: {} rows", out.csv.display(), out.rows.len()));
            }
        }
        Command::Report { inputs, out_dir } => {
            let (report, csv, txt) = report::cmd_report(&inputs, out_dir.as_deref())?;
            lines.push(format!("{} groups -> {} {}", report.groups.len(), csv.display(), txt.display()));
        }
    }
    Ok(lines)
}

/// Thread pool sized by `CALIB2STAGE_THREADS`, or rayon's default when unset.
pub fn pool() -> CliResult<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))
}
