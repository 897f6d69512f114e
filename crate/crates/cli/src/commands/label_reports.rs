//! `label-reports` — screen radiology report text for keywords and emit
//! cohort manifest rows.
//!
//! Reads every `<scan_id>.txt` in the reports directory, screens the
//! FINDINGS and IMPRESSION sections, and labels each scan: manual overrides
//! win, otherwise flagged reports become `uncertain` (pending review) and
//! unflagged ones `negative`. The patient id defaults to the scan id; join
//! a real scan-to-patient table afterwards if one exists.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use aortamil_core::cohort::{self, CohortRecord, Label, Split};
use aortamil_core::reports::{
    assign_label, keyword_screen, parse_report, read_overrides, MatchMode, ScreenLabel,
};

use crate::config::PipelineConfig;

/// Screening vocabulary used when `--keywords` is not given.
pub const DEFAULT_KEYWORDS: [&str; 3] = ["dissection", "hematoma", "ulcer"];

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Args {
    /// Directory of `<scan_id>.txt` reports (default: from config).
    #[arg(long)]
    pub reports_dir: Option<PathBuf>,
    /// Manual adjudications: CSV `scan_id,label`.
    #[arg(long)]
    pub overrides: Option<PathBuf>,
    /// Output manifest (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated keywords (default: dissection,hematoma,ulcer).
    #[arg(long)]
    pub keywords: Option<String>,
    /// Match keywords as substrings instead of whole words
    /// ("ulcerated" then hits "ulcer").
    #[arg(long)]
    pub substring: bool,
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let dir = args
        .reports_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.reports_dir.clone());
    let overrides = match &args.overrides {
        Some(path) => read_overrides(path)
            .with_context(|| format!("reading overrides {}", path.display()))?,
        None => Default::default(),
    };
    let keywords: Vec<String> = match &args.keywords {
        Some(list) => list
            .split(',')
            .map(|k| k.trim().to_owned())
            .filter(|k| !k.is_empty())
            .collect(),
        None => DEFAULT_KEYWORDS.iter().map(|&k| k.to_owned()).collect(),
    };
    let mode = if args.substring {
        MatchMode::Substring
    } else {
        MatchMode::WholeWord
    };

    let mut report_files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing reports in {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt") && p.is_file())
        .collect();
    report_files.sort();
    if report_files.is_empty() {
        bail!("no .txt reports found in {}", dir.display());
    }

    let mut records = Vec::new();
    let mut flagged = 0usize;
    for path in &report_files {
        let scan_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad report file name {}", path.display()))?
            .to_owned();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let doc = keyword_screen(parse_report(&text), &keywords, mode)
            .with_context(|| format!("screening report {}", path.display()))?;
        if doc.screen() == ScreenLabel::Flagged {
            flagged += 1;
        }
        let label = assign_label(&doc, &scan_id, &overrides);
        records.push(CohortRecord {
            patient_id: scan_id.clone(),
            scan_id,
            label,
            mean_hu: None,
            split: Split::Unassigned,
        });
    }

    let out = super::manifest_path(args.out.as_deref(), cfg);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    cohort::write_manifest(&out, &records)
        .with_context(|| format!("writing manifest {}", out.display()))?;

    let count = |l: Label| records.iter().filter(|r| r.label == l).count();
    log::info!(
        "label-reports: {} reports, {flagged} flagged -> {} positive, {} negative, {} uncertain ({})",
        records.len(),
        count(Label::Positive),
        count(Label::Negative),
        count(Label::Uncertain),
        out.display()
    );
    Ok(())
}
