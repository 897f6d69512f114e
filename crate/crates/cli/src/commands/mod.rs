//! Subcommand implementations and the file-layout conventions they share.
//!
//! Everything a stage produces lands in the working directory:
//!
//! ```text
//! <workdir>/
//!   manifest.csv                  cohort rows (updated in place by stages)
//!   straightened/<scan_id>.mhd    normalised straightened stacks
//!   histogram_match.csv           class histograms before/after matching
//!   model_<dir>.ckpt (+ .txt)     trained checkpoint per direction + sidecar
//!   history_<dir>.csv             per-epoch losses and validation AUC
//!   predictions_<dir>.csv         volume-level scores (scan_id,direction,score)
//!   slices/<scan_id>_<dir>.csv    per-slice scores (slice_index,score)
//!   ensemble.csv                  direction-averaged scores (scan_id,score)
//!   roc_<dir>.csv                 ROC curves (threshold,fpr,tpr)
//!   summary.csv                   AUC + CI table (model,direction,...)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so files
//! regenerated from the same inputs and seed are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use aortamil_core::cohort::{CohortRecord, Label, Split};
use aortamil_core::straighten::{reslice, ResliceAxis, StraightenedVolume};

use crate::config::PipelineConfig;

pub mod evaluate;
pub mod label_reports;
pub mod match_cohort;
pub mod pipeline;
pub mod predict;
pub mod split;
pub mod straighten;
pub mod synth;
pub mod train;

/// clap value parser for `--direction`.
pub fn parse_direction(s: &str) -> Result<ResliceAxis, String> {
    s.parse()
}

/// clap value parser for `--split`.
pub fn parse_split(s: &str) -> Result<Split, String> {
    match s.parse() {
        Ok(Split::Excluded | Split::Unassigned) | Err(_) => {
            Err(format!("unknown split {s:?} (expected train, val, or test)"))
        }
        Ok(split) => Ok(split),
    }
}

pub(crate) fn default_manifest(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.workdir.join("manifest.csv")
}

pub(crate) fn manifest_path(explicit: Option<&Path>, cfg: &PipelineConfig) -> PathBuf {
    explicit.map_or_else(|| default_manifest(cfg), Path::to_path_buf)
}

pub(crate) fn straightened_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.workdir.join("straightened")
}

pub(crate) fn checkpoint_path(cfg: &PipelineConfig, direction: ResliceAxis) -> PathBuf {
    cfg.paths.workdir.join(format!("model_{}.ckpt", direction.name()))
}

pub fn predictions_path(dir: &Path, direction: ResliceAxis) -> PathBuf {
    dir.join(format!("predictions_{}.csv", direction.name()))
}

/// Loads the straightened stack for one scan, reoriented for `direction`.
pub(crate) fn load_stack(
    cfg: &PipelineConfig,
    scan_id: &str,
    direction: ResliceAxis,
) -> Result<StraightenedVolume> {
    let path = straightened_dir(cfg).join(format!("{scan_id}.mhd"));
    let sv = StraightenedVolume::load(&path)
        .with_context(|| format!("loading straightened stack {}", path.display()))?;
    if !sv.is_normalized() {
        bail!(
            "straightened stack {} is not normalised; rerun the straighten stage",
            path.display()
        );
    }
    Ok(match direction {
        ResliceAxis::Xy => sv,
        other => reslice(&sv, other),
    })
}

/// Records usable as ground truth in `split`, in manifest order.
pub(crate) fn labeled_records(records: &[CohortRecord], split: Split) -> Vec<&CohortRecord> {
    records
        .iter()
        .filter(|r| r.split == split && r.label.is_definite())
        .collect()
}

pub(crate) fn is_positive(label: Label) -> bool {
    label == Label::Positive
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `scan_id,direction,score` rows.
pub fn write_predictions(
    path: &Path,
    direction: ResliceAxis,
    rows: &[(String, f64)],
) -> Result<()> {
    let mut text = String::from("scan_id,direction,score\n");
    for (scan_id, score) in rows {
        text.push_str(&format!("{scan_id},{},{score}\n", direction.name()));
    }
    write_text(path, &text)
}

/// Reads rows written by [`write_predictions`] into scan-id → score order-
/// preserving pairs.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "scan_id,direction,score")) => {}
        other => bail!("{}: bad predictions header: {other:?}", path.display()),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            bail!("{}:{}: expected 3 fields", path.display(), idx + 1);
        }
        let score: f64 = fields[2]
            .parse()
            .with_context(|| format!("{}:{}: bad score {:?}", path.display(), idx + 1, fields[2]))?;
        rows.push((fields[0].to_owned(), score));
    }
    Ok(rows)
}

/// Writes one scan's per-slice scores (`slice_index,score`).
pub fn write_slice_scores(path: &Path, scores: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("slice_index,score\n");
    for (idx, score) in scores {
        text.push_str(&format!("{idx},{score}\n"));
    }
    write_text(path, &text)
}

/// Reads a file written by [`write_slice_scores`].
pub fn read_slice_scores(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading slice scores {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "slice_index,score")) => {}
        other => bail!("{}: bad slice-score header: {other:?}", path.display()),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (i, s) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected 2 fields", path.display(), idx + 1))?;
        rows.push((i.parse()?, s.parse()?));
    }
    Ok(rows)
}

/// Ground-truth labels of one split keyed by scan id, in manifest order.
pub(crate) fn split_labels(
    records: &[CohortRecord],
    split: Split,
) -> (Vec<String>, BTreeMap<String, bool>) {
    let mut order = Vec::new();
    let mut labels = BTreeMap::new();
    for r in labeled_records(records, split) {
        order.push(r.scan_id.clone());
        labels.insert(r.scan_id.clone(), is_positive(r.label));
    }
    (order, labels)
}
