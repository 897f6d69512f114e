//! `evaluate` — AUC with bootstrap confidence intervals per direction, plus
//! the direction-averaged ensemble, written as a summary table and ROC
//! curve CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use aortamil_core::cohort::{self, Split};
use aortamil_core::eval::{bootstrap_ci, roc_auc, RocResult};
use aortamil_core::milnet::ensemble;
use aortamil_core::seed::derive_seed_str;
use aortamil_core::straighten::ResliceAxis;

use crate::config::PipelineConfig;

/// The model column written to the summary table.
const MODEL_NAME: &str = "mil";

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Which split the predictions cover.
    #[arg(long, value_parser = super::parse_split, default_value = "test")]
    pub split: Split,
    /// Directory holding `predictions_<direction>.csv` files
    /// (default: the workdir).
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
    /// Cohort manifest to read (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            split: Split::Test,
            predictions_dir: None,
            manifest: None,
        }
    }
}

struct DirectionScores {
    name: &'static str,
    /// Scores aligned with the manifest order of the evaluated split.
    scores: Vec<f64>,
}

fn roc_csv(roc: &RocResult) -> String {
    let mut text = String::from("threshold,fpr,tpr\n");
    for p in &roc.curve {
        text.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    text
}

fn write_roc(workdir: &Path, name: &str, roc: &RocResult) -> Result<()> {
    let path = workdir.join(format!("roc_{name}.csv"));
    std::fs::write(&path, roc_csv(roc)).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let records = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let (order, label_of) = super::split_labels(&records, args.split);
    if order.is_empty() {
        bail!("no labelled scans in the {} split of {}", args.split, manifest.display());
    }
    let labels: Vec<bool> = order.iter().map(|id| label_of[id]).collect();

    let pred_dir = args
        .predictions_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.workdir.clone());
    let mut directions: Vec<DirectionScores> = Vec::new();
    for axis in ResliceAxis::ALL {
        let path = super::predictions_path(&pred_dir, axis);
        if !path.is_file() {
            continue;
        }
        let by_id: BTreeMap<String, f64> = super::read_predictions(&path)?.into_iter().collect();
        let scores: Vec<f64> = order
            .iter()
            .map(|id| {
                by_id.get(id).copied().with_context(|| {
                    format!("{} has no score for {id} (predict the {} split first)",
                        path.display(), args.split)
                })
            })
            .collect::<Result<_>>()?;
        directions.push(DirectionScores {
            name: axis.name(),
            scores,
        });
    }
    if directions.is_empty() {
        bail!("no predictions_<direction>.csv files found in {}", pred_dir.display());
    }

    let ensemble_scores: Vec<f64> = (0..order.len())
        .map(|i| {
            let per_direction: Vec<f64> = directions.iter().map(|d| d.scores[i]).collect();
            ensemble(&per_direction).expect("at least one direction present")
        })
        .collect();
    let ensemble_path = cfg.paths.workdir.join("ensemble.csv");
    let mut text = String::from("scan_id,score\n");
    for (id, score) in order.iter().zip(&ensemble_scores) {
        text.push_str(&format!("{id},{score}\n"));
    }
    std::fs::write(&ensemble_path, text)
        .with_context(|| format!("writing {}", ensemble_path.display()))?;
    directions.push(DirectionScores {
        name: "ensemble",
        scores: ensemble_scores,
    });

    let mut summary = String::from("model,direction,auc,ci_low,ci_high,n_pos,n_neg\n");
    for d in &directions {
        let roc = roc_auc(&d.scores, &labels)
            .with_context(|| format!("computing the {} ROC", d.name))?;
        let (lo, hi) = bootstrap_ci(
            &d.scores,
            &labels,
            cfg.eval.n_boot,
            cfg.eval.level,
            derive_seed_str(cfg.seed, "evaluate", d.name),
        )
        .with_context(|| format!("bootstrapping the {} CI", d.name))?;
        write_roc(&cfg.paths.workdir, d.name, &roc)?;
        summary.push_str(&format!(
            "{MODEL_NAME},{},{},{},{},{},{}\n",
            d.name, roc.auc, lo, hi, roc.n_pos, roc.n_neg
        ));
        log::info!(
            "evaluate[{}]: AUC {:.4} ({:.0}% CI {:.4}-{:.4}) on {} pos / {} neg",
            d.name,
            roc.auc,
            cfg.eval.level * 100.0,
            lo,
            hi,
            roc.n_pos,
            roc.n_neg
        );
    }
    let summary_path = cfg.paths.workdir.join("summary.csv");
    std::fs::write(&summary_path, summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    log::info!("evaluate: summary written to {}", summary_path.display());
    Ok(())
}
