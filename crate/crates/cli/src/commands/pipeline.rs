//! `pipeline` — the full synthetic benchmark in one command: generate a
//! phantom cohort, straighten it, balance it, split it, train one classifier
//! per axis, score the held-out test set, and evaluate with confidence
//! intervals.
//!
//! Only the native (xy) straightened stacks are kept on disk; the yz and xz
//! views are derived in memory where needed. Without `--config` the
//! synthetic-benchmark profile is used (see `configs/synthetic.ini`).

use anyhow::{Context, Result};

use aortamil_core::straighten::ResliceAxis;

use crate::commands;
use crate::config::PipelineConfig;

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Total positive scans to generate (test scans included).
    #[arg(long, default_value_t = 100)]
    pub n_pos: usize,
    /// Total negative scans to generate (test scans included).
    #[arg(long, default_value_t = 100)]
    pub n_neg: usize,
    /// Positive scans held out for testing.
    #[arg(long, default_value_t = 30)]
    pub test_pos: usize,
    /// Negative scans held out for testing.
    #[arg(long, default_value_t = 30)]
    pub test_neg: usize,
    /// Fraction of non-test patients assigned to training.
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Generate some patients with two scans each.
    #[arg(long)]
    pub multi_scan: bool,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            test_pos: 30,
            test_neg: 30,
            train_frac: 0.8,
            multi_scan: false,
        }
    }
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let workdir = &cfg.paths.workdir;
    std::fs::create_dir_all(workdir)
        .with_context(|| format!("creating workdir {}", workdir.display()))?;
    let started = std::time::Instant::now();

    commands::synth::run(
        &commands::synth::Args {
            n_pos: args.n_pos,
            n_neg: args.n_neg,
            multi_scan: args.multi_scan,
            ..commands::synth::Args::default()
        },
        cfg,
    )?;

    commands::straighten::run(
        &commands::straighten::Args {
            volumes_dir: Some(workdir.join("volumes")),
            centerlines_dir: Some(workdir.join("centerlines")),
            ..commands::straighten::Args::default()
        },
        cfg,
    )?;

    commands::match_cohort::run(&commands::match_cohort::Args::default(), cfg)?;

    commands::split::run(
        &commands::split::Args {
            test_pos: args.test_pos,
            test_neg: args.test_neg,
            train_frac: args.train_frac,
            ..commands::split::Args::default()
        },
        cfg,
    )?;

    for direction in ResliceAxis::ALL {
        commands::train::run(
            &commands::train::Args {
                direction,
                ..commands::train::Args::default()
            },
            cfg,
        )?;
        commands::predict::run(
            &commands::predict::Args {
                direction,
                ..commands::predict::Args::default()
            },
            cfg,
        )?;
    }

    commands::evaluate::run(&commands::evaluate::Args::default(), cfg)?;

    log::info!(
        "pipeline: finished in {:.1} s; see {}",
        started.elapsed().as_secs_f64(),
        workdir.join("summary.csv").display()
    );
    Ok(())
}
