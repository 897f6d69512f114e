//! `straighten` — reformat each volume into a straightened stack along its
//! centerline, measure the mean centerline intensity, and normalise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use aortamil_core::centerline::{
    compute_frames, mean_centerline_hu, order_centerline_voxels, smooth_and_resample, Polyline,
};
use aortamil_core::cohort::{self, CohortRecord, Split};
use aortamil_core::straighten::{clip_and_scale, straighten_aorta};
use aortamil_core::volume::Volume3D;

use crate::config::PipelineConfig;

/// Moving-average window (points) applied to centerlines before resampling.
const SMOOTH_WINDOW: usize = 5;
/// Threshold above which a mask voxel counts as centerline.
const MASK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Args {
    /// Cohort manifest to process (default: `<workdir>/manifest.csv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of `<scan_id>.mhd` volumes (default: from config).
    #[arg(long)]
    pub volumes_dir: Option<PathBuf>,
    /// Directory of centerlines: `<scan_id>.txt` polylines or `<scan_id>.mhd`
    /// binary masks (default: from config).
    #[arg(long)]
    pub centerlines_dir: Option<PathBuf>,
}

/// Straightens one scan; returns the mean centerline intensity in HU.
fn process_scan(
    cfg: &PipelineConfig,
    volumes_dir: &Path,
    centerlines_dir: &Path,
    out_dir: &Path,
    scan_id: &str,
) -> Result<f64> {
    let vol = Volume3D::load(&volumes_dir.join(format!("{scan_id}.mhd")))
        .with_context(|| format!("loading volume for {scan_id}"))?;

    let txt = centerlines_dir.join(format!("{scan_id}.txt"));
    let mask = centerlines_dir.join(format!("{scan_id}.mhd"));
    let polyline = if txt.is_file() {
        Polyline::load_txt(&txt).with_context(|| format!("loading centerline for {scan_id}"))?
    } else if mask.is_file() {
        let mask_vol = Volume3D::load(&mask)
            .with_context(|| format!("loading centerline mask for {scan_id}"))?;
        order_centerline_voxels(&mask_vol, MASK_THRESHOLD)
            .with_context(|| format!("ordering centerline mask for {scan_id}"))?
    } else {
        bail!(
            "no centerline for {scan_id}: neither {} nor {} exists",
            txt.display(),
            mask.display()
        );
    };

    let step = cfg.straighten.spacing;
    let centerline = smooth_and_resample(&polyline, step, SMOOTH_WINDOW)
        .with_context(|| format!("resampling centerline for {scan_id}"))?;
    let frames = compute_frames(&centerline)
        .with_context(|| format!("framing centerline for {scan_id}"))?;
    let sv = straighten_aorta(&vol, &centerline, &frames, cfg.straighten.patch_size, step, scan_id)
        .with_context(|| format!("straightening {scan_id}"))?;
    let mean_hu = mean_centerline_hu(&vol, &centerline);
    let sv = clip_and_scale(sv).with_context(|| format!("normalising {scan_id}"))?;
    sv.save(&out_dir.join(format!("{scan_id}.mhd")))
        .with_context(|| format!("saving straightened stack for {scan_id}"))?;
    Ok(mean_hu)
}

pub fn run(args: &Args, cfg: &PipelineConfig) -> Result<()> {
    let manifest = super::manifest_path(args.manifest.as_deref(), cfg);
    let mut records: Vec<CohortRecord> = cohort::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let volumes_dir = args
        .volumes_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.volumes_dir.clone());
    let centerlines_dir = args
        .centerlines_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.centerlines_dir.clone());
    let out_dir = super::straightened_dir(cfg);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let todo: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split != Split::Excluded)
        .collect();
    let means: Vec<f64> = todo
        .par_iter()
        .map(|&i| process_scan(cfg, &volumes_dir, &centerlines_dir, &out_dir, &records[i].scan_id))
        .collect::<Result<_>>()?;
    for (&i, mean) in todo.iter().zip(means) {
        records[i].mean_hu = Some(mean);
    }

    let out_manifest = super::default_manifest(cfg);
    cohort::write_manifest(&out_manifest, &records)
        .with_context(|| format!("writing manifest {}", out_manifest.display()))?;
    log::info!(
        "straighten: processed {} scans into {} (manifest: {})",
        todo.len(),
        out_dir.display(),
        out_manifest.display()
    );
    Ok(())
}
