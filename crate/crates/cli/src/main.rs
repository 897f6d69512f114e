//! `aortamil` — aortic-CT straightening and weakly-supervised classification
//! pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or config), 2 on
//! data errors (missing or malformed inputs, failed stages).

use std::process::ExitCode;

use clap::Parser;

use aortamil_cli::commands;
use aortamil_cli::config::{self, PipelineConfig, WORKDIR_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "aortamil",
    version,
    about = "Straighten aortas from CT volumes and screen them with a slice-bag classifier"
)]
struct Cli {
    /// Configuration file; flags override its values (see README for the
    /// grammar). Defaults: clinical-scale values, or the synthetic benchmark
    /// profile for `pipeline`.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Working directory for all outputs; also settable via AORTAMIL_WORKDIR.
    #[arg(long, global = true)]
    workdir: Option<std::path::PathBuf>,
    /// Master seed; every randomised stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Generate a synthetic cohort of curved-tube phantom scans.
    Synth(commands::synth::Args),
    /// Straighten volumes along their centerlines and measure mean HU.
    Straighten(commands::straighten::Args),
    /// Balance class mean-HU histograms by excluding negatives.
    MatchCohort(commands::match_cohort::Args),
    /// Screen radiology reports for keywords and write manifest rows.
    LabelReports(commands::label_reports::Args),
    /// Assign train/validation/test splits, keeping patients together.
    Split(commands::split::Args),
    /// Train a classifier on straightened stacks along one axis.
    Train(commands::train::Args),
    /// Score straightened stacks with a trained checkpoint.
    Predict(commands::predict::Args),
    /// Compute AUC and bootstrap confidence intervals; emits ROC CSVs.
    Evaluate(commands::evaluate::Args),
    /// Run the full synthetic benchmark end to end.
    Pipeline(commands::pipeline::Args),
}

/// Builds the effective config: file (or profile default), then environment,
/// then flags. Errors here are usage errors.
fn resolve_config(cli: &Cli) -> Result<PipelineConfig, config::ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => match cli.command {
            Command::Pipeline(_) => PipelineConfig::synthetic_benchmark(),
            _ => PipelineConfig::default(),
        },
    };
    if let Ok(dir) = std::env::var(WORKDIR_ENV) {
        if !dir.is_empty() {
            cfg.paths.workdir = dir.into();
        }
    }
    if let Some(dir) = &cli.workdir {
        cfg.paths.workdir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(command: &Command, cfg: &PipelineConfig) -> anyhow::Result<()> {
    match command {
        Command::Synth(args) => commands::synth::run(args, cfg),
        Command::Straighten(args) => commands::straighten::run(args, cfg),
        Command::MatchCohort(args) => commands::match_cohort::run(args, cfg),
        Command::LabelReports(args) => commands::label_reports::run(args, cfg),
        Command::Split(args) => commands::split::run(args, cfg),
        Command::Train(args) => commands::train::run(args, cfg),
        Command::Predict(args) => commands::predict::run(args, cfg),
        Command::Evaluate(args) => commands::evaluate::run(args, cfg),
        Command::Pipeline(args) => commands::pipeline::run(args, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cfg.paths.workdir) {
        eprintln!("error: cannot create workdir {}: {e}", cfg.paths.workdir.display());
        return ExitCode::from(2);
    }

    match dispatch(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
