//! `clrn`: split, train, evaluate and map cropland from pixel time series.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

/// Fixed output file names under `--out`.
pub mod outputs {
    pub const MODEL: &str = "model.json";
    pub const STATS: &str = "stats.json";
    pub const HISTORY: &str = "history.csv";
    pub const REPORT: &str = "report.json";
    pub const ROC: &str = "roc.csv";
    pub const RESOLVED_CONFIG: &str = "resolved_config.json";
    pub const EXTERNAL_REPORT: &str = "external_report.json";
    pub const SPLIT_NIGERIA: &str = "split_nigeria.csv";
    pub const SPLIT_GEOWIKI: &str = "split_geowiki.csv";
}

const EXIT_PARTIAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "clrn",
    version,
    about = "Cropland mapping from monthly satellite pixel time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel tiles for predict-map.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Probability at or above which a pixel or point is cropland.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model file for evaluate and predict-map (default: <out>/model.json).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Tile manifest for predict-map.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write deterministic split files for the configured label tables.
    Split,
    /// Fit an LSTM or random forest and report on the validation split.
    Train,
    /// Score a model on the Nigeria test split.
    Evaluate,
    /// Predict probability and binary grids for every tile of a manifest.
    PredictMap,
    /// Write merged normalization statistics.
    Stats,
}

fn init_logging() -> Result<()> {
    let level = std::env::var("CLRN_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        bail!("CLRN_LOG_LEVEL must be one of error, warn, info, debug (got `{level}`)");
    }
    env_logger::Builder::new().parse_filters(&level).init();
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = ExperimentConfig::resolve(
        cli.config.as_deref(),
        Overrides {
            seed: cli.seed,
            workers: cli.workers,
            threshold: cli.threshold,
            out: cli.out,
            model_file: cli.model,
            manifest: cli.manifest,
        },
    )?;
    cfg.write_resolved()?;
    match cli.command {
        Command::Split => commands::split(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Stats => {
            commands::stats(&cfg)?;
        }
        Command::Evaluate => {
            let report = commands::evaluate(&cfg)?;
            println!("{}", serde_json::to_string(&report.metrics)?);
        }
        Command::PredictMap => {
            let report = commands::predict_map(&cfg)?;
            if !report.is_complete() {
                eprintln!("{}", serde_json::to_string(&report.errors)?);
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
