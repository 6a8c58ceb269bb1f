//! Command-line driver for the block-structured operator inference
//! pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 missing stage input,
//! 3 numeric failure, 4 no feasible regularization candidate.

mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("{0}")]
    NoFeasible(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::NoFeasible(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "blockrom")]
#[command(about = "Block-structured operator inference for coupled two-physics systems")]
struct Cli {
    /// Path to the pipeline configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Random seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a sequence of stages (default: the full modeling pipeline).
    Run {
        /// Comma-separated subset of stages to run, in dependency order.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Generate full-order snapshots from the synthetic coupled model.
    Simulate,
    /// Lift, shift, and scale the snapshots.
    Preprocess,
    /// Compute the reduced bases and the singular-value spectrum.
    Pod,
    /// Infer operators at the configured regularization weights.
    Train,
    /// Grid-search the regularization weights, then train at the best point.
    Search,
    /// Integrate the trained reduced models over the prediction horizon.
    Predict,
    /// Compute quantity-of-interest series and error tables.
    Evaluate,
    /// Compare block and monolithic models: accuracy, size, step timing.
    Compare,
    /// Print and export operator entry counts.
    Count,
    /// Compute flow-condition solver inputs and print the reference table.
    Flutter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = config::load_config(&config_path)?;
    if let Some(out_dir) = cli.out_dir {
        cfg.out_dir = out_dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Run { stages } => {
            let stages: Vec<String> = stages.unwrap_or_else(|| {
                pipeline::DEFAULT_STAGES.iter().map(|s| s.to_string()).collect()
            });
            pipeline::run_pipeline(&cfg, &stages)
        }
        other => {
            let stage = match other {
                Command::Simulate => "simulate",
                Command::Preprocess => "preprocess",
                Command::Pod => "pod",
                Command::Train => "train",
                Command::Search => "search",
                Command::Predict => "predict",
                Command::Evaluate => "evaluate",
                Command::Compare => "compare",
                Command::Count => "count",
                Command::Flutter => "flutter",
                Command::Run { .. } => unreachable!("handled above"),
            };
            let mut manifest = Manifest::new();
            pipeline::run_stage(stage, &cfg, &mut manifest)?;
            if !manifest.is_empty() {
                manifest.write(&cfg.out_dir)?;
            }
            Ok(())
        }
    }
}
