//! `train` — fit one classifier on straightened stacks viewed along a
//! chosen axis, and persist the checkpoint plus training history.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use aortamil_core::cohort::{self, CohortRecord, Split};
use aortamil_core::milnet::{save_checkpoint, train, EpochStats, MilConfig, TrainConfig};
use aortamil_core::seed::derive_seed_str;
use aortamil_core::straighten::{ResliceAxis, StraightenedVolume};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Which axis the classifier sees the stacks along.
    #[arg(long, value_parser = super::parse_direction, default_value = "xy")]
    pub direction: ResliceAxis,
    /// Cohort manifest to read (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            direction: ResliceAxis::Xy,
            manifest: None,
        }
    }
}

fn load_split(
    cfg: &PipelineConfig,
    records: &[CohortRecord],
    split: Split,
    direction: ResliceAxis,
) -> Result<Vec<(StraightenedVolume, bool)>> {
    let wanted = super::labeled_records(records, split);
    wanted
        .par_iter()
        .map(|r| {
            let sv = super::load_stack(cfg, &r.scan_id, direction)?;
            Ok((sv, super::is_positive(r.label)))
        })
        .collect()
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut text = String::from("epoch,train_loss,val_loss,val_auc\n");
    for e in history {
        text.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_auc
        ));
    }
    text
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let records = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;

    let train_items = load_split(cfg, &records, Split::Train, args.direction)?;
    let val_items = load_split(cfg, &records, Split::Val, args.direction)?;
    if train_items.is_empty() || val_items.is_empty() {
        bail!(
            "need labelled train and val scans, got {} / {}; run `split` first",
            train_items.len(),
            val_items.len()
        );
    }

    let direction = args.direction.name();
    let train_cfg = TrainConfig {
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        slice_count: cfg.straighten.slice_count,
        seed: derive_seed_str(cfg.seed, "train", direction),
        patience: cfg.train.patience,
        ..TrainConfig::default()
    };
    log::info!(
        "train[{direction}]: {} train / {} val scans, lr {}, batch {}, {} epochs",
        train_items.len(),
        val_items.len(),
        train_cfg.learning_rate,
        train_cfg.batch_size,
        train_cfg.epochs,
    );
    let out = train(&MilConfig::default(), &train_cfg, &train_items, &val_items)
        .with_context(|| format!("training the {direction} classifier"))?;

    let ckpt = super::checkpoint_path(cfg, args.direction);
    save_checkpoint(&out.model, &ckpt)
        .with_context(|| format!("saving checkpoint {}", ckpt.display()))?;
    let history_path = cfg.paths.workdir.join(format!("history_{direction}.csv"));
    std::fs::write(&history_path, history_csv(&out.history))
        .with_context(|| format!("writing {}", history_path.display()))?;

    let best = &out.history[out.best_epoch - 1];
    log::info!(
        "train[{direction}]: best epoch {} (val_loss {:.4}, val_auc {:.4}){}; checkpoint {}",
        out.best_epoch,
        best.val_loss,
        best.val_auc,
        if out.stopped_early { ", stopped early" } else { "" },
        ckpt.display()
    );
    Ok(())
}
