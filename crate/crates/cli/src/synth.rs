//! Synthetic cohort generation: curved-tube phantoms with known centerlines.
//!
//! Each scan is a bright tube (contrast-filled lumen) meandering through a
//! dark volume along a smooth analytic curve. Positive scans additionally
//! contain a "flap": a thin, dark planar chord crossing the lumen over a
//! contiguous span of slices, splitting it into two lumens of slightly
//! different intensity. The chord is kept clear of the centerline itself, so
//! the mean intensity along the centerline carries no class signal and a
//! classifier has to find the flap geometry rather than a brightness shift.
//!
//! Outputs, all under one directory:
//!
//! * `volumes/<scan_id>.mhd` + `.raw` — the phantom volumes;
//! * `centerlines/<scan_id>.txt` — the exact analytic centerline, one
//!   `x y z` mm triple per line;
//! * `manifest.csv` — cohort rows (`mean_hu` left blank, split `unassigned`);
//! * `synth_meta.csv` — ground-truth flap spans for localisation checks,
//!   as fractions of the z extent (blank for negatives).
//!
//! Generation is deterministic: every scan derives its own RNG stream from
//! the master seed and its id, so reruns (and any parallel schedule) produce
//! byte-identical trees.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use aortamil_core::cohort::{self, CohortRecord, Label, Split};
use aortamil_core::seed::derive_seed_str;
use aortamil_core::volume::Volume3D;

/// Background intensity (soft-tissue-like water equivalent), HU.
const BACKGROUND_HU: f64 = 0.0;
/// Range of the random intensity step between the two flap-separated lumens, HU.
const SIDE_DELTA_HU: (f64, f64) = (8.0, 15.0);
/// Range of the random in-plane curve amplitudes, mm.
const CURVE_AMPLITUDE_MM: (f64, f64) = (2.0, 4.0);
/// Sampling step of the written centerline polyline, mm along z.
const CENTERLINE_STEP_MM: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth parameters: {0}")]
    BadParams(String),
    #[error(
        "flap is too wide for the lumen: width {width_mm} mm needs to fit inside \
         the smallest lumen diameter {diameter_mm} mm with room for two sides"
    )]
    FlapTooWide { width_mm: f64, diameter_mm: f64 },
    #[error(transparent)]
    Volume(#[from] aortamil_core::volume::VolumeError),
    #[error(transparent)]
    Cohort(#[from] aortamil_core::cohort::CohortError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Knobs for [`generate_synthetic_cohort`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Volume dimensions in voxels (x, y, z).
    pub dims: [usize; 3],
    /// Isotropic voxel spacing, mm.
    pub spacing: f64,
    /// Lumen radius is drawn uniformly from this range, mm.
    pub lumen_radius_mm: (f64, f64),
    /// Lumen intensity is drawn uniformly from this range (both classes), HU.
    pub lumen_hu: (f64, f64),
    /// Flap thickness, in-plane voxels.
    pub flap_width_px: f64,
    /// Intensity offset of flap voxels relative to the lumen, HU.
    pub flap_delta_hu: f64,
    /// Fraction of the z extent the flap spans (contiguous, random start).
    pub flap_span_frac: f64,
    /// Standard deviation of the additive Gaussian noise, HU.
    pub noise_sigma: f64,
    /// Give every pair of consecutive scans one shared patient, to exercise
    /// patient-level splitting.
    pub multi_scan: bool,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            dims: [40, 40, 36],
            spacing: 1.0,
            lumen_radius_mm: (5.0, 8.0),
            lumen_hu: (250.0, 350.0),
            flap_width_px: 3.0,
            flap_delta_hu: -250.0,
            flap_span_frac: 0.6,
            noise_sigma: 20.0,
            multi_scan: false,
            seed: 0,
        }
    }
}

/// Ground truth for one generated scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMetaRow {
    pub scan_id: String,
    pub label: Label,
    /// Flap span as fractions of the z extent, inclusive; `None` for
    /// negatives.
    pub flap_span_frac: Option<(f64, f64)>,
}

/// What [`generate_synthetic_cohort`] wrote.
#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub records: Vec<CohortRecord>,
    pub meta: Vec<SynthMetaRow>,
}

fn validate(p: &SynthParams) -> Result<(), SynthError> {
    let bad = |m: &str| Err(SynthError::BadParams(m.to_owned()));
    if p.n_pos + p.n_neg == 0 {
        return bad("need at least one scan");
    }
    if p.dims.iter().any(|&d| d < 8) {
        return bad("dims must be at least 8 voxels per axis");
    }
    if !p.spacing.is_finite() || p.spacing <= 0.0 {
        return bad("spacing must be positive");
    }
    let (r_lo, r_hi) = p.lumen_radius_mm;
    if !(r_lo.is_finite() && r_hi.is_finite()) || r_lo <= 0.0 || r_lo > r_hi {
        return bad("lumen_radius_mm must satisfy 0 < lo <= hi");
    }
    let (h_lo, h_hi) = p.lumen_hu;
    if !(h_lo.is_finite() && h_hi.is_finite()) || h_lo > h_hi {
        return bad("lumen_hu must satisfy lo <= hi");
    }
    if !(0.0..=1.0).contains(&p.flap_span_frac) || p.flap_span_frac == 0.0 {
        return bad("flap_span_frac must be in (0, 1]");
    }
    if !p.flap_width_px.is_finite() || p.flap_width_px <= 0.0 {
        return bad("flap_width_px must be positive");
    }
    if !p.noise_sigma.is_finite() || p.noise_sigma < 0.0 {
        return bad("noise_sigma must be non-negative");
    }
    // The chord must fit inside the narrowest lumen with clearance on both
    // sides: its offset from the centre starts past the half-width plus a
    // safety margin and stays within half the radius.
    let half_w = p.flap_width_px * p.spacing / 2.0;
    if p.n_pos > 0 && half_w + 0.5 >= r_lo / 2.0 {
        return Err(SynthError::FlapTooWide {
            width_mm: p.flap_width_px * p.spacing,
            diameter_mm: 2.0 * r_lo,
        });
    }
    // The tube (curve swing + radius) must stay inside the volume.
    let half_extent = (p.dims[0].min(p.dims[1]) - 1) as f64 * p.spacing / 2.0;
    if CURVE_AMPLITUDE_MM.1 + r_hi + 2.0 * p.spacing > half_extent {
        return bad("dims too small for the largest lumen radius plus curve swing");
    }
    Ok(())
}

/// In-plane centerline position at height `z` (mm). The curve is a full sine
/// period in x and a half period in y, with per-scan random amplitude and
/// phase, so every scan bends differently but stays single-valued in z.
struct Curve {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    phase_x: f64,
    phase_y: f64,
    z_len: f64,
}

impl Curve {
    fn at(&self, z: f64) -> (f64, f64) {
        let t = z / self.z_len;
        let x = self.cx + self.ax * (2.0 * std::f64::consts::PI * t + self.phase_x).sin();
        let y = self.cy + self.ay * (std::f64::consts::PI * t + self.phase_y).sin();
        (x, y)
    }
}

struct ScanPlan {
    scan_id: String,
    patient_id: String,
    label: Label,
    meta: SynthMetaRow,
}

struct Flap {
    /// First and last affected z index, inclusive.
    z_span: (usize, usize),
    /// Chord normal direction (unit, in-plane).
    normal: (f64, f64),
    /// Signed offset of the chord from the lumen centre along `normal`, mm.
    offset: f64,
    half_width_mm: f64,
    delta_hu: f64,
    side_delta_hu: f64,
}

fn generate_scan(
    p: &SynthParams,
    scan_id: &str,
    positive: bool,
) -> Result<(Volume3D, Vec<[f64; 3]>, Option<(f64, f64)>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(p.seed, "synth_scan", scan_id));
    let [nx, ny, nz] = p.dims;
    let s = p.spacing;
    let z_len = (nz - 1) as f64 * s;

    let radius = rng.random_range(p.lumen_radius_mm.0..=p.lumen_radius_mm.1);
    let lumen = rng.random_range(p.lumen_hu.0..=p.lumen_hu.1);
    let curve = Curve {
        cx: (nx - 1) as f64 * s / 2.0,
        cy: (ny - 1) as f64 * s / 2.0,
        ax: rng.random_range(CURVE_AMPLITUDE_MM.0..=CURVE_AMPLITUDE_MM.1),
        ay: rng.random_range(CURVE_AMPLITUDE_MM.0..=CURVE_AMPLITUDE_MM.1),
        phase_x: rng.random_range(0.0..std::f64::consts::TAU),
        phase_y: rng.random_range(0.0..std::f64::consts::TAU),
        z_len,
    };

    let flap = if positive {
        let span = ((p.flap_span_frac * nz as f64).round() as usize).clamp(1, nz);
        let z0 = rng.random_range(0..=nz - span);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let half_w = p.flap_width_px * s / 2.0;
        // Offset past the chord half-width (margin 0.5 mm) but within half
        // the radius, with a random side, so the chord always splits the
        // lumen without covering its centre.
        let offset_mag = rng.random_range(half_w + 0.5..=radius / 2.0);
        let offset = if rng.random::<bool>() { offset_mag } else { -offset_mag };
        Some(Flap {
            z_span: (z0, z0 + span - 1),
            normal: (-theta.sin(), theta.cos()),
            offset,
            half_width_mm: half_w,
            delta_hu: p.flap_delta_hu,
            side_delta_hu: rng.random_range(SIDE_DELTA_HU.0..=SIDE_DELTA_HU.1),
        })
    } else {
        None
    };

    let mut data = vec![0f32; nx * ny * nz];
    let r2 = radius * radius;
    for k in 0..nz {
        let z = k as f64 * s;
        let (cx, cy) = curve.at(z);
        let flap_here = flap
            .as_ref()
            .filter(|f| (f.z_span.0..=f.z_span.1).contains(&k));
        for j in 0..ny {
            let dy = j as f64 * s - cy;
            let row = (k * ny + j) * nx;
            for i in 0..nx {
                let dx = i as f64 * s - cx;
                let v = if dx * dx + dy * dy <= r2 {
                    match flap_here {
                        Some(f) => {
                            let d = dx * f.normal.0 + dy * f.normal.1 - f.offset;
                            if d.abs() <= f.half_width_mm {
                                lumen + f.delta_hu
                            } else if d > 0.0 {
                                lumen + f.side_delta_hu
                            } else {
                                lumen - f.side_delta_hu
                            }
                        }
                        None => lumen,
                    }
                } else {
                    BACKGROUND_HU
                };
                data[row + i] = v as f32;
            }
        }
    }

    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("sigma validated");
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let vol = Volume3D::new([nx, ny, nz], [s; 3], [0.0; 3], -1024.0, data)?;

    let mut polyline = Vec::new();
    let steps = (z_len / CENTERLINE_STEP_MM).ceil() as usize;
    for q in 0..=steps {
        let z = (q as f64 * CENTERLINE_STEP_MM).min(z_len);
        let (x, y) = curve.at(z);
        polyline.push([x, y, z]);
    }

    let span_frac = flap.map(|f| {
        let denom = (nz - 1) as f64;
        (f.z_span.0 as f64 / denom, f.z_span.1 as f64 / denom)
    });
    Ok((vol, polyline, span_frac))
}

fn plan_scans(p: &SynthParams) -> Vec<ScanPlan> {
    (0..p.n_pos + p.n_neg)
        .map(|i| {
            let scan_id = format!("scan_{i:04}");
            let patient = if p.multi_scan { i / 2 } else { i };
            let label = if i < p.n_pos { Label::Positive } else { Label::Negative };
            ScanPlan {
                patient_id: format!("pat_{patient:04}"),
                label,
                meta: SynthMetaRow {
                    scan_id: scan_id.clone(),
                    label,
                    flap_span_frac: None,
                },
                scan_id,
            }
        })
        .collect()
}

fn write_polyline(path: &Path, points: &[[f64; 3]]) -> Result<(), SynthError> {
    let io_err = |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for p in points {
        writeln!(out, "{:.6} {:.6} {:.6}", p[0], p[1], p[2]).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Writes the ground-truth flap table (`scan_id,label,flap_lo_frac,flap_hi_frac`).
pub fn write_meta(path: &Path, rows: &[SynthMetaRow]) -> Result<(), SynthError> {
    let mut text = String::from("scan_id,label,flap_lo_frac,flap_hi_frac\n");
    for row in rows {
        match row.flap_span_frac {
            Some((lo, hi)) => {
                text.push_str(&format!("{},{},{lo:.6},{hi:.6}\n", row.scan_id, row.label))
            }
            None => text.push_str(&format!("{},{},,\n", row.scan_id, row.label)),
        }
    }
    std::fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a table written by [`write_meta`].
pub fn read_meta(path: &Path) -> Result<Vec<SynthMetaRow>, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, m: String| SynthError::BadParams(format!("{}:{line}: {m}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == "scan_id,label,flap_lo_frac,flap_hi_frac" => {}
        other => return Err(bad(1, format!("bad meta header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(idx + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let label: Label = fields[1]
            .parse()
            .map_err(|e| bad(idx + 1, format!("{e}")))?;
        let span = match (fields[2], fields[3]) {
            ("", "") => None,
            (lo, hi) => {
                let lo: f64 = lo.parse().map_err(|_| bad(idx + 1, format!("bad lo {lo:?}")))?;
                let hi: f64 = hi.parse().map_err(|_| bad(idx + 1, format!("bad hi {hi:?}")))?;
                Some((lo, hi))
            }
        };
        rows.push(SynthMetaRow {
            scan_id: fields[0].to_owned(),
            label,
            flap_span_frac: span,
        });
    }
    Ok(rows)
}

/// Generates the cohort under `out_dir` (creating `volumes/` and
/// `centerlines/` inside it) and writes `manifest.csv` and `synth_meta.csv`.
pub fn generate_synthetic_cohort(
    out_dir: &Path,
    p: &SynthParams,
) -> Result<SynthSummary, SynthError> {
    validate(p)?;
    let volumes_dir = out_dir.join("volumes");
    let centerlines_dir = out_dir.join("centerlines");
    for dir in [&volumes_dir, &centerlines_dir] {
        std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut plans = plan_scans(p);
    let spans: Vec<Option<(f64, f64)>> = plans
        .par_iter()
        .map(|plan| {
            let (vol, polyline, span) =
                generate_scan(p, &plan.scan_id, plan.label == Label::Positive)?;
            vol.save(&volumes_dir.join(format!("{}.mhd", plan.scan_id)))?;
            write_polyline(
                &centerlines_dir.join(format!("{}.txt", plan.scan_id)),
                &polyline,
            )?;
            Ok(span)
        })
        .collect::<Result<_, SynthError>>()?;
    for (plan, span) in plans.iter_mut().zip(spans) {
        plan.meta.flap_span_frac = span;
    }

    let records: Vec<CohortRecord> = plans
        .iter()
        .map(|plan| CohortRecord {
            scan_id: plan.scan_id.clone(),
            patient_id: plan.patient_id.clone(),
            label: plan.label,
            mean_hu: None,
            split: Split::Unassigned,
        })
        .collect();
    cohort::write_manifest(&out_dir.join("manifest.csv"), &records)?;

    let meta: Vec<SynthMetaRow> = plans.into_iter().map(|plan| plan.meta).collect();
    write_meta(&out_dir.join("synth_meta.csv"), &meta)?;

    Ok(SynthSummary { records, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> SynthParams {
        SynthParams {
            n_pos: 2,
            n_neg: 2,
            dims: [24, 24, 20],
            spacing: 1.0,
            lumen_radius_mm: (4.0, 5.0),
            flap_width_px: 2.0,
            noise_sigma: 0.0,
            seed: 11,
            ..SynthParams::default()
        }
    }

    #[test]
    fn default_params_validate() {
        validate(&SynthParams::default()).unwrap();
    }

    #[test]
    fn writes_the_full_tree_with_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_synthetic_cohort(dir.path(), &tiny_params()).unwrap();
        assert_eq!(summary.records.len(), 4);
        for (i, rec) in summary.records.iter().enumerate() {
            assert_eq!(rec.scan_id, format!("scan_{i:04}"));
            assert_eq!(rec.label, if i < 2 { Label::Positive } else { Label::Negative });
            assert_eq!(rec.split, Split::Unassigned);
            assert_eq!(rec.mean_hu, None);
            assert!(dir.path().join(format!("volumes/{}.mhd", rec.scan_id)).is_file());
            assert!(dir.path().join(format!("volumes/{}.raw", rec.scan_id)).is_file());
            assert!(dir
                .path()
                .join(format!("centerlines/{}.txt", rec.scan_id))
                .is_file());
        }
        let meta = read_meta(&dir.path().join("synth_meta.csv")).unwrap();
        assert_eq!(meta.len(), 4);
        for row in &meta[..2] {
            let (lo, hi) = row.flap_span_frac.expect("positives carry a span");
            assert!((0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0);
        }
        assert!(meta[2..].iter().all(|r| r.flap_span_frac.is_none()));

        let manifest = cohort::read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest, summary.records);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic_cohort(a.path(), &tiny_params()).unwrap();
        generate_synthetic_cohort(b.path(), &tiny_params()).unwrap();
        for rel in [
            "manifest.csv",
            "synth_meta.csv",
            "volumes/scan_0000.raw",
            "volumes/scan_0000.mhd",
            "volumes/scan_0003.raw",
            "centerlines/scan_0001.txt",
        ] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between reruns");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut p = tiny_params();
        generate_synthetic_cohort(a.path(), &p).unwrap();
        p.seed = 12;
        generate_synthetic_cohort(b.path(), &p).unwrap();
        let x = std::fs::read(a.path().join("volumes/scan_0000.raw")).unwrap();
        let y = std::fs::read(b.path().join("volumes/scan_0000.raw")).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn noiseless_flap_voxels_sit_at_lumen_plus_delta() {
        let mut p = tiny_params();
        p.lumen_hu = (300.0, 300.0);
        p.flap_delta_hu = -200.0;
        let (vol, _, span) = generate_scan(&p, "scan_0000", true).unwrap();
        let (lo, hi) = span.unwrap();
        let nz = p.dims[2];
        let z_lo = (lo * (nz - 1) as f64).round() as usize;
        let z_hi = (hi * (nz - 1) as f64).round() as usize;

        let mut flap_in_span = 0usize;
        let mut flap_outside_span = 0usize;
        let mut sides_in_one_slice = std::collections::BTreeSet::new();
        for k in 0..nz {
            for j in 0..p.dims[1] {
                for i in 0..p.dims[0] {
                    let v = vol.at(i, j, k);
                    if (v - 100.0).abs() < 1e-3 {
                        if (z_lo..=z_hi).contains(&k) {
                            flap_in_span += 1;
                        } else {
                            flap_outside_span += 1;
                        }
                    }
                    if k == z_lo && v > 250.0 {
                        // Collect the distinct side intensities (rounded to
                        // tenths to be robust to f32 storage).
                        sides_in_one_slice.insert((v * 10.0).round() as i64);
                    }
                }
            }
        }
        assert!(flap_in_span > 0, "no flap voxels found in the span");
        assert_eq!(flap_outside_span, 0, "flap must not leak outside its span");
        assert_eq!(
            sides_in_one_slice.len(),
            2,
            "expected two distinct side intensities, got {sides_in_one_slice:?}"
        );
    }

    #[test]
    fn negatives_have_a_uniform_lumen() {
        let mut p = tiny_params();
        p.lumen_hu = (300.0, 300.0);
        let (vol, polyline, span) = generate_scan(&p, "scan_0002", false).unwrap();
        assert!(span.is_none());
        // Sample the volume at centerline points: all lumen-valued.
        for pt in polyline {
            let v = vol.sample_trilinear(pt);
            assert!((v - 300.0).abs() < 1.0, "centerline sample {v} not lumen");
        }
    }

    #[test]
    fn zero_positive_count_yields_all_negative_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny_params();
        (p.n_pos, p.n_neg) = (0, 3);
        let summary = generate_synthetic_cohort(dir.path(), &p).unwrap();
        assert_eq!(summary.records.len(), 3);
        assert!(summary.records.iter().all(|r| r.label == Label::Negative));
    }

    #[test]
    fn oversized_flap_is_rejected() {
        let mut p = tiny_params();
        p.flap_width_px = 12.0;
        let e = generate_synthetic_cohort(tempfile::tempdir().unwrap().path(), &p).unwrap_err();
        assert!(matches!(e, SynthError::FlapTooWide { .. }), "{e}");
    }

    #[test]
    fn multi_scan_pairs_consecutive_scans_per_patient() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny_params();
        p.multi_scan = true;
        let summary = generate_synthetic_cohort(dir.path(), &p).unwrap();
        assert_eq!(summary.records[0].patient_id, summary.records[1].patient_id);
        assert_eq!(summary.records[2].patient_id, summary.records[3].patient_id);
        assert_ne!(summary.records[1].patient_id, summary.records[2].patient_id);
    }

    #[test]
    fn centerline_stays_inside_the_lumen_and_volume() {
        let p = SynthParams {
            noise_sigma: 0.0,
            ..SynthParams::default()
        };
        let (vol, polyline, _) = generate_scan(&p, "scan_0000", true).unwrap();
        let [nx, ny, _] = p.dims;
        for pt in &polyline {
            assert!(pt[0] > 0.0 && pt[0] < (nx - 1) as f64 * p.spacing);
            assert!(pt[1] > 0.0 && pt[1] < (ny - 1) as f64 * p.spacing);
            // The chord never covers the centerline, so on-curve samples are
            // always one of the two side intensities.
            let v = f64::from(vol.sample_trilinear(*pt));
            assert!(v > p.lumen_hu.0 - 30.0, "sample {v} fell outside the lumen");
        }
    }
}
