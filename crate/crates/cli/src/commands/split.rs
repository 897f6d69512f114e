//! `split` — carve out a held-out test set (optional) and assign the rest to
//! train/validation, always keeping all scans of a patient together.

use std::path::PathBuf;

use anyhow::{Context, Result};

use aortamil_core::cohort::{self, patient_level_split, select_test_set, CohortRecord, Split};
use aortamil_core::seed::derive_seed;

use crate::config::PipelineConfig;

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Cohort manifest to process (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Positive scans to hold out as the test set (0 = no test set).
    #[arg(long, default_value_t = 0)]
    pub test_pos: usize,
    /// Negative scans to hold out as the test set (0 = no test set).
    #[arg(long, default_value_t = 0)]
    pub test_neg: usize,
    /// Fraction of remaining patients assigned to training.
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            manifest: None,
            test_pos: 0,
            test_neg: 0,
            train_frac: 0.8,
        }
    }
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let mut records: Vec<CohortRecord> = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;

    if args.test_pos + args.test_neg > 0 {
        select_test_set(
            &mut records,
            args.test_pos,
            args.test_neg,
            derive_seed(cfg.seed, "test_set", 0),
        )
        .context("selecting the test set")?;
    }
    patient_level_split(
        &mut records,
        args.train_frac,
        derive_seed(cfg.seed, "train_val_split", 0),
    )
    .context("splitting into train/validation")?;

    let out_manifest = super::default_manifest(cfg);
    cohort::write_manifest(&out_manifest, &records)
        .with_context(|| format!("writing manifest {}", out_manifest.display()))?;

    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    log::info!(
        "split: {} train, {} val, {} test, {} excluded ({})",
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        count(Split::Excluded),
        out_manifest.display()
    );
    Ok(())
}
