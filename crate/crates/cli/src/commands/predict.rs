//! `predict` — score straightened stacks with a trained checkpoint.
//!
//! Volume scores go to `predictions_<direction>.csv`; each scan also gets a
//! per-slice score file under `slices/` for localisation and review. By
//! default every slice of a stack is scored exactly once (deterministic and
//! the most informative for localisation); `--slice-count` switches to the
//! seeded random subset used in training.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use aortamil_core::cohort::{self, Split};
use aortamil_core::milnet::{load_checkpoint, predict, MilModel, Prediction};
use aortamil_core::straighten::ResliceAxis;

use crate::config::PipelineConfig;

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Which axis the classifier sees the stacks along (must match the
    /// checkpoint's training direction).
    #[arg(long, value_parser = super::parse_direction, default_value = "xy")]
    pub direction: ResliceAxis,
    /// Checkpoint to load (default: `<workdir>/model_<direction>.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, value_parser = super::parse_split, default_value = "test")]
    pub split: Split,
    /// Score a random subset of this many slices per stack instead of every
    /// slice once.
    #[arg(long)]
    pub slice_count: Option<usize>,
    /// Cohort manifest to read (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            direction: ResliceAxis::Xy,
            checkpoint: None,
            split: Split::Test,
            slice_count: None,
            manifest: None,
        }
    }
}

fn score_scan(
    cfg: &PipelineConfig,
    model: &MilModel<f32>,
    scan_id: &str,
    args: &Args,
) -> Result<Prediction> {
    let sv = super::load_stack(cfg, scan_id, args.direction)?;
    let count = args.slice_count.unwrap_or_else(|| sv.slices());
    predict(model, &sv, count, cfg.seed).with_context(|| format!("scoring {scan_id}"))
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let records = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let wanted = super::labeled_records(&records, args.split);
    if wanted.is_empty() {
        bail!("no labelled scans in the {} split of {}", args.split, manifest.display());
    }

    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| super::checkpoint_path(cfg, args.direction));
    let model = load_checkpoint(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;

    let predictions: Vec<Prediction> = wanted
        .par_iter()
        .map(|r| score_scan(cfg, &model, &r.scan_id, args))
        .collect::<Result<_>>()?;

    let direction = args.direction.name();
    let slices_dir = cfg.paths.workdir.join("slices");
    std::fs::create_dir_all(&slices_dir)
        .with_context(|| format!("creating {}", slices_dir.display()))?;
    let mut rows = Vec::with_capacity(wanted.len());
    for (record, pred) in wanted.iter().zip(&predictions) {
        rows.push((record.scan_id.clone(), pred.bag_score));
        super::write_slice_scores(
            &slices_dir.join(format!("{}_{direction}.csv", record.scan_id)),
            &pred.slice_scores,
        )?;
    }
    let out = super::predictions_path(&cfg.paths.workdir, args.direction);
    super::write_predictions(&out, args.direction, &rows)?;
    log::info!(
        "predict[{direction}]: scored {} scans from the {} split -> {}",
        rows.len(),
        args.split,
        out.display()
    );
    Ok(())
}
