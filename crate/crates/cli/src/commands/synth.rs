//! `synth` — generate a synthetic phantom cohort.

use std::path::PathBuf;

use anyhow::{Context, Result};

use aortamil_core::seed::derive_seed;

use crate::config::PipelineConfig;
use crate::synth::{generate_synthetic_cohort, SynthParams};

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// Output directory (default: the workdir). Creates `volumes/`,
    /// `centerlines/`, `manifest.csv`, and `synth_meta.csv` inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of positive (flap-bearing) scans.
    #[arg(long, default_value_t = 100)]
    pub n_pos: usize,
    /// Number of negative scans.
    #[arg(long, default_value_t = 100)]
    pub n_neg: usize,
    /// Volume dimensions in voxels, comma separated.
    #[arg(long, value_parser = parse_dims, default_value = "40,40,36")]
    pub dims: [usize; 3],
    /// Isotropic voxel spacing in mm.
    #[arg(long, default_value_t = 1.0)]
    pub voxel_spacing: f64,
    /// Flap thickness in in-plane voxels.
    #[arg(long, default_value_t = 3.0)]
    pub flap_width_px: f64,
    /// Flap intensity offset from the lumen, HU (negative = darker).
    #[arg(long, default_value_t = -250.0, allow_hyphen_values = true)]
    pub flap_delta_hu: f64,
    /// Fraction of the z extent the flap spans.
    #[arg(long, default_value_t = 0.6)]
    pub flap_span_frac: f64,
    /// Additive Gaussian noise sigma, HU.
    #[arg(long, default_value_t = 20.0)]
    pub noise_sigma: f64,
    /// Give every pair of consecutive scans a shared patient id, to exercise
    /// patient-level splitting.
    #[arg(long)]
    pub multi_scan: bool,
}

impl Default for Args {
    fn default() -> Self {
        Self {
            out: None,
            n_pos: 100,
            n_neg: 100,
            dims: [40, 40, 36],
            voxel_spacing: 1.0,
            flap_width_px: 3.0,
            flap_delta_hu: -250.0,
            flap_span_frac: 0.6,
            noise_sigma: 20.0,
            multi_scan: false,
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated sizes, got {s:?}"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p
            .trim()
            .parse()
            .map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok(dims)
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.workdir.clone());
    let params = SynthParams {
        n_pos: args.n_pos,
        n_neg: args.n_neg,
        dims: args.dims,
        spacing: args.voxel_spacing,
        flap_width_px: args.flap_width_px,
        flap_delta_hu: args.flap_delta_hu,
        flap_span_frac: args.flap_span_frac,
        noise_sigma: args.noise_sigma,
        multi_scan: args.multi_scan,
        seed: derive_seed(cfg.seed, "synth", 0),
        ..SynthParams::default()
    };
    let summary = generate_synthetic_cohort(&out, &params)
        .with_context(|| format!("generating synthetic cohort in {}", out.display()))?;
    log::info!(
        "synth: wrote {} scans ({} positive, {} negative) to {}",
        summary.records.len(),
        args.n_pos,
        args.n_neg,
        out.display()
    );
    Ok(())
}
