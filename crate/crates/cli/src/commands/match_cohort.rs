//! `match-cohort` — equalise the class mean-intensity distributions by
//! greedily excluding negatives, and record the before/after histograms.

use std::path::PathBuf;

use anyhow::{Context, Result};

use aortamil_core::cohort::{
    self, build_histograms, match_histograms, CohortRecord, HistogramPair, MatchStatus, Split,
};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Args {
    /// Cohort manifest to process (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Histogram bin count (default: from config).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Histogram range low edge, HU (default: from config).
    #[arg(long, allow_hyphen_values = true)]
    pub range_lo: Option<f64>,
    /// Histogram range high edge, HU (default: from config).
    #[arg(long)]
    pub range_hi: Option<f64>,
    /// Similarity at which matching stops (default: from config).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Cap on the fraction of negatives removed (default: from config).
    #[arg(long)]
    pub max_removed_fraction: Option<f64>,
}

fn histogram_csv(before: &HistogramPair, after: &HistogramPair) -> String {
    let mut text = String::from("bin_lo,bin_hi,pos_before,neg_before,pos_after,neg_after\n");
    let edges = before.bin_edges();
    for b in 0..before.bins() {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            edges[b],
            edges[b + 1],
            before.pos_counts()[b],
            before.neg_counts()[b],
            after.pos_counts()[b],
            after.neg_counts()[b],
        ));
    }
    text
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let mut records: Vec<CohortRecord> = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;

    let bins = args.bins.unwrap_or(cfg.cohort.bins);
    let range = (
        args.range_lo.unwrap_or(cfg.cohort.range_lo),
        args.range_hi.unwrap_or(cfg.cohort.range_hi),
    );
    let threshold = args.threshold.unwrap_or(cfg.cohort.threshold);
    let max_removed = args
        .max_removed_fraction
        .unwrap_or(cfg.cohort.max_removed_fraction);

    let before = build_histograms(&records, bins, range).context("building class histograms")?;
    let outcome = match_histograms(&records, bins, range, threshold, max_removed)
        .context("matching class histograms")?;

    let removed: std::collections::BTreeSet<&str> =
        outcome.removed.iter().map(String::as_str).collect();
    for r in &mut records {
        if removed.contains(r.scan_id.as_str()) {
            r.split = Split::Excluded;
        }
    }

    let out_manifest = super::default_manifest(cfg);
    cohort::write_manifest(&out_manifest, &records)
        .with_context(|| format!("writing manifest {}", out_manifest.display()))?;

    let hist_path = cfg.paths.workdir.join("histogram_match.csv");
    std::fs::write(&hist_path, histogram_csv(&before, &outcome.final_histograms))
        .with_context(|| format!("writing {}", hist_path.display()))?;

    let status = match outcome.status {
        MatchStatus::Converged => "converged",
        MatchStatus::NoImprovement => "stopped (no removable excess)",
        MatchStatus::RemovalCapReached => "stopped (removal cap reached)",
    };
    log::info!(
        "match-cohort: {status}; removed {} negatives, similarity {:.4} (threshold {threshold})",
        outcome.removed.len(),
        outcome.final_cross_correlation,
    );
    Ok(())
}
