//! Curved planar reformation of the aorta.
//!
//! Given a CT volume, a resampled centerline, and its rotation-minimising
//! frames, [`straighten_aorta`] extracts one square cross-section per
//! centerline sample and stacks them into a [`StraightenedVolume`]: a volume
//! in which the vessel runs straight down the slice axis. Downstream steps
//! normalise intensities to `[0, 1]`, sample slice subsets with neighbour
//! channels for the classifier, and reslice the stack along orthogonal axes
//! for multi-view ensembling.

use rayon::prelude::*;

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::centerline::{Centerline, Frame, FrameField};
use crate::vec3;
use crate::volume::{Volume3D, VolumeError};

/// Default cross-section edge length in pixels.
pub const DEFAULT_PATCH_SIZE: usize = 114;
/// Default in-plane pixel spacing (and slice step) in millimetres.
pub const DEFAULT_SPACING_MM: f64 = 0.7;
/// Default number of slices sampled per volume for the classifier.
pub const DEFAULT_SLICE_COUNT: usize = 50;
/// Clamp range applied before rescaling intensities to `[0, 1]`.
pub const CLIP_RANGE_HU: (f32, f32) = (-1024.0, 2048.0);
/// Slice counts outside this range are anatomically implausible for a thoracic
/// aorta sampled at the default step and trigger a warning.
pub const EXPECTED_SLICE_RANGE: std::ops::RangeInclusive<usize> = 150..=1000;

/// Errors from straightening, normalisation, sampling, or reslicing.
#[derive(Debug, Error)]
pub enum StraightenError {
    #[error("patch size must be >= 1")]
    BadPatchSize,
    #[error("pixel spacing must be finite and > 0, got {0}")]
    BadSpacing(f64),
    #[error("centerline has {points} points but frame field has {frames}")]
    FrameCountMismatch { points: usize, frames: usize },
    #[error("volume {0:?} is already normalised; refusing to normalise twice")]
    DoubleNormalization(String),
    #[error("volume {0:?} must be normalised to [0,1] before slice sampling")]
    NotNormalized(String),
    #[error("slice sample count must be >= 1")]
    BadSliceCount,
    #[error("straightened dims must all be >= 1, got {0} x {1} x {2}")]
    BadDims(usize, usize, usize),
    #[error("straightened data length {actual} does not match dims (expected {expected})")]
    DataLenMismatch { expected: usize, actual: usize },
    #[error("normalised volume contains value {value} outside [0,1] at index {index}")]
    OutOfRange { index: usize, value: f32 },
    #[error("slice bags in a batch must share shape: {0}")]
    MixedBatch(String),
    #[error("empty slice batch")]
    EmptyBatch,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Axis choice for [`reslice`].
///
/// `Xy` is the native orientation (slices perpendicular to the vessel);
/// `Yz` and `Xz` cut the straightened stack along the two orthogonal planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResliceAxis {
    Xy,
    Yz,
    Xz,
}

impl ResliceAxis {
    pub const ALL: [ResliceAxis; 3] = [ResliceAxis::Xy, ResliceAxis::Yz, ResliceAxis::Xz];

    pub fn name(self) -> &'static str {
        match self {
            ResliceAxis::Xy => "xy",
            ResliceAxis::Yz => "yz",
            ResliceAxis::Xz => "xz",
        }
    }
}

impl std::str::FromStr for ResliceAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "xy" => Ok(ResliceAxis::Xy),
            "yz" => Ok(ResliceAxis::Yz),
            "xz" => Ok(ResliceAxis::Xz),
            other => Err(format!("unknown reslice axis {other:?} (expected xy, yz, or xz)")),
        }
    }
}

/// A stack of cross-sections with the vessel running down the slice axis.
///
/// Data is slice-major: value `(s, h, w)` lives at `(s * height + h) * width + w`.
/// `spacing_mm` applies in-plane and between slices (the centerline was
/// resampled at the same step). `normalized` records whether intensities have
/// been rescaled from HU to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightenedVolume {
    slices: usize,
    height: usize,
    width: usize,
    spacing_mm: f64,
    source_id: String,
    normalized: bool,
    data: Vec<f32>,
}

impl StraightenedVolume {
    pub fn new(
        slices: usize,
        height: usize,
        width: usize,
        spacing_mm: f64,
        source_id: String,
        normalized: bool,
        data: Vec<f32>,
    ) -> Result<Self, StraightenError> {
        if slices == 0 || height == 0 || width == 0 {
            return Err(StraightenError::BadDims(slices, height, width));
        }
        if !spacing_mm.is_finite() || spacing_mm <= 0.0 {
            return Err(StraightenError::BadSpacing(spacing_mm));
        }
        let expected = slices * height * width;
        if data.len() != expected {
            return Err(StraightenError::DataLenMismatch {
                expected,
                actual: data.len(),
            });
        }
        if normalized {
            if let Some(idx) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(StraightenError::OutOfRange {
                    index: idx,
                    value: data[idx],
                });
            }
        }
        Ok(Self {
            slices,
            height,
            width,
            spacing_mm,
            source_id,
            normalized,
            data,
        })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, s: usize, h: usize, w: usize) -> f32 {
        debug_assert!(s < self.slices && h < self.height && w < self.width);
        self.data[(s * self.height + h) * self.width + w]
    }

    /// One slice as a contiguous `height * width` view.
    pub fn slice(&self, s: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[s * n..(s + 1) * n]
    }

    /// Repackages the stack as a [`Volume3D`] with dims `[width, height, slices]`
    /// (both layouts are w-fastest, so the buffer moves without copying).
    /// The fill value is 0 for normalised stacks and air HU otherwise.
    pub fn into_volume(self) -> Volume3D {
        let fill = if self.normalized { 0.0 } else { crate::volume::DEFAULT_FILL_VALUE };
        Volume3D::new(
            [self.width, self.height, self.slices],
            [self.spacing_mm; 3],
            [0.0; 3],
            fill,
            self.data,
        )
        .expect("straightened invariants imply a valid volume")
    }

    /// Reinterprets a volume (dims `[width, height, slices]`) as a
    /// straightened stack. Whether the stack is normalised is inferred from
    /// the value range: a real CT reformation always contains near-air
    /// intensities far below 0, so data entirely inside `[0, 1]` is taken to
    /// be normalised.
    pub fn from_volume(vol: Volume3D, source_id: &str) -> Result<Self, StraightenError> {
        let normalized = vol
            .data()
            .iter()
            .all(|v| (-1e-6..=1.0 + 1e-6).contains(&f64::from(*v)));
        Self::from_volume_with(vol, source_id, normalized)
    }

    /// As [`StraightenedVolume::from_volume`] with the normalisation state
    /// stated explicitly.
    pub fn from_volume_with(
        vol: Volume3D,
        source_id: &str,
        normalized: bool,
    ) -> Result<Self, StraightenError> {
        let [w, h, s] = vol.dims();
        let spacing = vol.spacing();
        if (spacing[0] - spacing[1]).abs() > 1e-9 || (spacing[0] - spacing[2]).abs() > 1e-9 {
            return Err(StraightenError::BadSpacing(spacing[1]));
        }
        let mut data = vol.into_data();
        if normalized {
            // Clamp float noise from storage so the [0,1] invariant holds.
            for v in &mut data {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Self::new(s, h, w, spacing[0], source_id.to_owned(), normalized, data)
    }

    /// Saves via the volume format; see [`StraightenedVolume::into_volume`].
    pub fn save(&self, path: &std::path::Path) -> Result<(), StraightenError> {
        self.clone().into_volume().save(path)?;
        Ok(())
    }

    /// Loads a stack saved by [`StraightenedVolume::save`]; the source id is
    /// taken from the file stem.
    pub fn load(path: &std::path::Path) -> Result<Self, StraightenError> {
        let vol = Volume3D::load(path)?;
        let source_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unknown")
            .to_owned();
        Self::from_volume(vol, &source_id)
    }
}

/// Samples one square cross-section perpendicular to the centerline.
///
/// Pixel `(row, col)` of the `patch_size x patch_size` output is the trilinear
/// sample at
/// `center + (col - (P-1)/2) * spacing * normal + (row - (P-1)/2) * spacing * binormal`,
/// so the patch is centered on the centerline point and oriented by the frame.
/// Pixels falling outside the volume take its fill value.
pub fn extract_cross_section(
    vol: &Volume3D,
    center: [f64; 3],
    frame: &Frame,
    patch_size: usize,
    spacing_mm: f64,
) -> Result<Vec<f32>, StraightenError> {
    if patch_size == 0 {
        return Err(StraightenError::BadPatchSize);
    }
    if !spacing_mm.is_finite() || spacing_mm <= 0.0 {
        return Err(StraightenError::BadSpacing(spacing_mm));
    }
    let half = (patch_size - 1) as f64 / 2.0;
    let mut out = Vec::with_capacity(patch_size * patch_size);
    for row in 0..patch_size {
        let dv = (row as f64 - half) * spacing_mm;
        let row_base = vec3::add(center, vec3::scale(frame.binormal, dv));
        for col in 0..patch_size {
            let du = (col as f64 - half) * spacing_mm;
            let p = vec3::add(row_base, vec3::scale(frame.normal, du));
            out.push(vol.sample_trilinear(p));
        }
    }
    Ok(out)
}

/// Extracts a cross-section at every centerline sample and stacks them.
///
/// Slices are computed in parallel but written to disjoint output ranges in
/// slice order, so the result is identical for any thread count. A slice
/// count outside [`EXPECTED_SLICE_RANGE`] is logged as a warning (short or
/// implausibly long aortas usually mean a bad centerline) but not an error.
pub fn straighten_aorta(
    vol: &Volume3D,
    centerline: &Centerline,
    frames: &FrameField,
    patch_size: usize,
    spacing_mm: f64,
    source_id: &str,
) -> Result<StraightenedVolume, StraightenError> {
    if centerline.len() != frames.len() {
        return Err(StraightenError::FrameCountMismatch {
            points: centerline.len(),
            frames: frames.len(),
        });
    }
    if patch_size == 0 {
        return Err(StraightenError::BadPatchSize);
    }
    if !spacing_mm.is_finite() || spacing_mm <= 0.0 {
        return Err(StraightenError::BadSpacing(spacing_mm));
    }
    let slices = centerline.len();
    if !EXPECTED_SLICE_RANGE.contains(&slices) {
        log::warn!(
            "straightened {source_id}: {slices} slices is outside the expected range \
             {}..={}; check the centerline",
            EXPECTED_SLICE_RANGE.start(),
            EXPECTED_SLICE_RANGE.end()
        );
    }
    let plane = patch_size * patch_size;
    let mut data = vec![0f32; slices * plane];
    let results: Result<Vec<()>, StraightenError> = data
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(s, chunk)| {
            let section = extract_cross_section(
                vol,
                centerline.points()[s],
                &frames.frames()[s],
                patch_size,
                spacing_mm,
            )?;
            chunk.copy_from_slice(&section);
            Ok(())
        })
        .collect();
    results?;
    StraightenedVolume::new(
        slices,
        patch_size,
        patch_size,
        spacing_mm,
        source_id.to_owned(),
        false,
        data,
    )
}

/// Clamps intensities to [`CLIP_RANGE_HU`] and rescales them to `[0, 1]`.
///
/// Applying this to an already-normalised stack would silently crush the
/// dynamic range, so that case is an error rather than a no-op.
pub fn clip_and_scale(sv: StraightenedVolume) -> Result<StraightenedVolume, StraightenError> {
    if sv.normalized {
        return Err(StraightenError::DoubleNormalization(sv.source_id));
    }
    let (lo, hi) = CLIP_RANGE_HU;
    let span = hi - lo;
    let mut sv = sv;
    for v in &mut sv.data {
        *v = (v.clamp(lo, hi) - lo) / span;
    }
    sv.normalized = true;
    Ok(sv)
}

/// A fixed-size set of slices sampled from one straightened volume, with
/// neighbour channels, ready for the classifier.
///
/// `data` is `[count, height, width, 3]` channel-last; channel `c` of sample
/// `n` is slice `indices[n] + c - 1` clamped to the stack. `indices` is
/// sorted; it is strictly increasing unless the stack had fewer slices than
/// requested, in which case every available slice appears at least once and
/// the remainder is drawn with replacement (`padded` is then true).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBag {
    pub source_id: String,
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
    pub padded: bool,
    pub data: Vec<f32>,
}

impl SliceBag {
    pub fn count(&self) -> usize {
        self.indices.len()
    }

    /// One sample as a contiguous `height * width * 3` view.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.height * self.width * 3;
        &self.data[n * stride..(n + 1) * stride]
    }
}

/// A batch of slice bags with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    bags: Vec<SliceBag>,
}

impl SliceBatch {
    pub fn from_bags(bags: Vec<SliceBag>) -> Result<Self, StraightenError> {
        let first = bags.first().ok_or(StraightenError::EmptyBatch)?;
        let shape = (first.height, first.width, first.count());
        for bag in &bags {
            if (bag.height, bag.width, bag.count()) != shape {
                return Err(StraightenError::MixedBatch(format!(
                    "{:?} has shape {}x{}x{}, expected {}x{}x{}",
                    bag.source_id,
                    bag.count(),
                    bag.height,
                    bag.width,
                    shape.2,
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(Self { bags })
    }

    pub fn bags(&self) -> &[SliceBag] {
        &self.bags
    }
}

/// Samples `count` slices from a normalised stack, with neighbour channels.
///
/// When the stack has at least `count` slices, indices are drawn uniformly
/// without replacement and sorted. Otherwise every slice is included once and
/// the shortfall is drawn uniformly with replacement, so short vessels are
/// padded rather than rejected.
pub fn sample_slices(
    sv: &StraightenedVolume,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SliceBag, StraightenError> {
    if count == 0 {
        return Err(StraightenError::BadSliceCount);
    }
    if !sv.normalized {
        return Err(StraightenError::NotNormalized(sv.source_id.clone()));
    }
    let s_total = sv.slices;
    let (mut indices, padded) = if s_total >= count {
        (
            sample_without_replacement(rng, s_total, count).into_vec(),
            false,
        )
    } else {
        let mut idx: Vec<usize> = (0..s_total).collect();
        for _ in s_total..count {
            idx.push(rng.random_range(0..s_total));
        }
        (idx, true)
    };
    indices.sort_unstable();

    let plane = sv.height * sv.width;
    let mut data = Vec::with_capacity(count * plane * 3);
    for &i in &indices {
        let prev = sv.slice(i.saturating_sub(1));
        let curr = sv.slice(i);
        let next = sv.slice((i + 1).min(s_total - 1));
        for p in 0..plane {
            data.push(prev[p]);
            data.push(curr[p]);
            data.push(next[p]);
        }
    }
    Ok(SliceBag {
        source_id: sv.source_id.clone(),
        height: sv.height,
        width: sv.width,
        indices,
        padded,
        data,
    })
}

/// Reorients a straightened stack so the classifier can view it along a
/// different axis.
///
/// With input shape `(S, H, W)`:
/// * `Xy` returns an identical copy,
/// * `Yz` returns shape `(W, S, H)` with `out[s', h', w'] = in[h', w', s']`,
/// * `Xz` returns shape `(H, W, S)` with `out[s', h', w'] = in[w', s', h']`.
///
/// `Xz` is the inverse of `Yz`: reslicing `Yz` output through `Xz` restores
/// the original stack bit for bit.
pub fn reslice(sv: &StraightenedVolume, axis: ResliceAxis) -> StraightenedVolume {
    let (s_in, h_in, w_in) = (sv.slices, sv.height, sv.width);
    let (s_out, h_out, w_out, index): (usize, usize, usize, fn(&StraightenedVolume, usize, usize, usize) -> f32) =
        match axis {
            ResliceAxis::Xy => (s_in, h_in, w_in, |v, s, h, w| v.at(s, h, w)),
            ResliceAxis::Yz => (w_in, s_in, h_in, |v, s, h, w| v.at(h, w, s)),
            ResliceAxis::Xz => (h_in, w_in, s_in, |v, s, h, w| v.at(w, s, h)),
        };
    let mut data = Vec::with_capacity(s_out * h_out * w_out);
    for s in 0..s_out {
        for h in 0..h_out {
            for w in 0..w_out {
                data.push(index(sv, s, h, w));
            }
        }
    }
    StraightenedVolume {
        slices: s_out,
        height: h_out,
        width: w_out,
        spacing_mm: sv.spacing_mm,
        source_id: sv.source_id.clone(),
        normalized: sv.normalized,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centerline::{compute_frames, smooth_and_resample, Polyline};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn axis_frame() -> Frame {
        Frame {
            tangent: [0.0, 0.0, 1.0],
            normal: [1.0, 0.0, 0.0],
            binormal: [0.0, 1.0, 0.0],
        }
    }

    #[test]
    fn cross_section_samples_the_expected_world_points() {
        // Affine field f = 10 + 2x + 3y - z sampled on a frame with normal +x
        // and binormal +y: pixel (r,c) must equal f at the analytic position.
        let dims = [40, 40, 40];
        let mut vol = Volume3D::filled(dims, [1.0; 3], [0.0; 3], 0.0).unwrap();
        for k in 0..40 {
            for j in 0..40 {
                for i in 0..40 {
                    vol.set(i, j, k, (10.0 + 2.0 * i as f64 + 3.0 * j as f64 - k as f64) as f32);
                }
            }
        }
        let center = [20.0, 20.0, 20.0];
        let patch = 5usize;
        let spacing = 2.0;
        let section = extract_cross_section(&vol, center, &axis_frame(), patch, spacing).unwrap();
        for r in 0..patch {
            for c in 0..patch {
                let x = center[0] + (c as f64 - 2.0) * spacing;
                let y = center[1] + (r as f64 - 2.0) * spacing;
                let want = 10.0 + 2.0 * x + 3.0 * y - center[2];
                let got = f64::from(section[r * patch + c]);
                assert!((got - want).abs() < 1e-3, "({r},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn cross_section_outside_volume_uses_fill() {
        let vol = Volume3D::filled([10, 10, 10], [1.0; 3], [0.0; 3], 50.0).unwrap();
        // Patch much larger than the volume: corners must be fill value.
        let section =
            extract_cross_section(&vol, [4.5, 4.5, 4.5], &axis_frame(), 41, 1.0).unwrap();
        assert_eq!(section[0], -1024.0);
        let mid = 20 * 41 + 20;
        assert_eq!(section[mid], 50.0);
    }

    #[test]
    fn straightens_a_bent_tube_into_a_centered_disk() {
        // Quarter-circle tube of radius 4 mm around an arc of radius 25 mm in
        // the xz-plane. After straightening, every slice must show the lumen
        // centered, and the four mid-edge pixels must be background.
        let dims = [80, 40, 80];
        let arc_r = 25.0;
        let tube_r = 4.0;
        let cy = 20.0;
        let mut vol = Volume3D::filled(dims, [1.0; 3], [0.0; 3], -1000.0).unwrap();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let (x, y, z) = (i as f64, j as f64, k as f64);
                    let radial = (x * x + z * z).sqrt();
                    let d2 = (radial - arc_r).powi(2) + (y - cy).powi(2);
                    if d2 <= tube_r * tube_r {
                        vol.set(i, j, k, 300.0);
                    }
                }
            }
        }
        let mut pts = Vec::new();
        for t in 0..60 {
            let th = std::f64::consts::FRAC_PI_2 * (0.08 + 0.84 * t as f64 / 59.0);
            pts.push([arc_r * th.cos(), cy, arc_r * th.sin()]);
        }
        let poly = Polyline::new(pts).unwrap();
        let cl = smooth_and_resample(&poly, 0.7, 5).unwrap();
        let frames = compute_frames(&cl).unwrap();
        let sv = straighten_aorta(&vol, &cl, &frames, 21, 0.7, "tube").unwrap();
        assert_eq!(sv.height(), 21);
        assert_eq!(sv.width(), 21);
        assert_eq!(sv.slices(), cl.len());
        assert!(!sv.is_normalized());
        for s in 0..sv.slices() {
            assert!(sv.at(s, 10, 10) > 250.0, "slice {s} center not in lumen");
            for (h, w) in [(10, 0), (10, 20), (0, 10), (20, 10)] {
                assert!(
                    sv.at(s, h, w) < -500.0,
                    "slice {s} edge ({h},{w}) = {} not background",
                    sv.at(s, h, w)
                );
            }
        }
    }

    #[test]
    fn straighten_requires_matching_frames() {
        let vol = Volume3D::filled([10, 10, 10], [1.0; 3], [0.0; 3], 0.0).unwrap();
        let poly = Polyline::new(vec![[2.0, 5.0, 5.0], [7.0, 5.0, 5.0]]).unwrap();
        let cl = smooth_and_resample(&poly, 1.0, 1).unwrap();
        let frames = compute_frames(&cl).unwrap();
        let short = Polyline::new(vec![[2.0, 5.0, 5.0], [5.0, 5.0, 5.0]]).unwrap();
        let short_cl = smooth_and_resample(&short, 1.0, 1).unwrap();
        assert!(matches!(
            straighten_aorta(&vol, &short_cl, &frames, 5, 1.0, "x"),
            Err(StraightenError::FrameCountMismatch { .. })
        ));
        assert!(matches!(
            straighten_aorta(&vol, &cl, &frames, 0, 1.0, "x"),
            Err(StraightenError::BadPatchSize)
        ));
    }

    fn small_stack(values: Vec<f32>, s: usize, h: usize, w: usize) -> StraightenedVolume {
        StraightenedVolume::new(s, h, w, 0.7, "t".into(), false, values).unwrap()
    }

    #[test]
    fn clip_and_scale_maps_the_window_to_unit_range() {
        let sv = small_stack(vec![-2000.0, -1024.0, 512.0, 2048.0, 3000.0, 0.0], 1, 2, 3);
        let norm = clip_and_scale(sv).unwrap();
        assert!(norm.is_normalized());
        let d = norm.data();
        assert_eq!(d[0], 0.0); // clamped below
        assert_eq!(d[1], 0.0);
        assert_relative_eq!(d[2], 0.5, epsilon = 1e-6);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[4], 1.0); // clamped above
        assert_relative_eq!(d[5], 1024.0 / 3072.0, epsilon = 1e-6);

        assert!(matches!(
            clip_and_scale(norm),
            Err(StraightenError::DoubleNormalization(_))
        ));
    }

    fn normalized_ramp(slices: usize, h: usize, w: usize) -> StraightenedVolume {
        // Each slice filled with a distinct value s / slices, so slice
        // identity is recoverable from pixel values.
        let mut data = Vec::new();
        for s in 0..slices {
            data.extend(std::iter::repeat(s as f32 / slices as f32).take(h * w));
        }
        StraightenedVolume::new(slices, h, w, 0.7, "ramp".into(), true, data).unwrap()
    }

    #[test]
    fn sample_slices_without_replacement_is_sorted_and_distinct() {
        let sv = normalized_ramp(40, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bag = sample_slices(&sv, 12, &mut rng).unwrap();
        assert_eq!(bag.count(), 12);
        assert!(!bag.padded);
        for pair in bag.indices.windows(2) {
            assert!(pair[0] < pair[1], "indices not strictly increasing");
        }
        assert!(*bag.indices.last().unwrap() < 40);

        // Same seed, same draw; different seed, different draw.
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let bag2 = sample_slices(&sv, 12, &mut rng2).unwrap();
        assert_eq!(bag.indices, bag2.indices);
        let mut rng3 = ChaCha8Rng::seed_from_u64(6);
        let bag3 = sample_slices(&sv, 12, &mut rng3).unwrap();
        assert_ne!(bag.indices, bag3.indices);
    }

    #[test]
    fn sample_slices_pads_short_stacks_with_replacement() {
        let sv = normalized_ramp(5, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bag = sample_slices(&sv, 9, &mut rng).unwrap();
        assert_eq!(bag.count(), 9);
        assert!(bag.padded);
        for s in 0..5 {
            assert!(bag.indices.contains(&s), "slice {s} missing from padded bag");
        }
        for pair in bag.indices.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn sample_slices_builds_clamped_neighbour_channels() {
        let sv = normalized_ramp(6, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bag = sample_slices(&sv, 6, &mut rng).unwrap();
        assert_eq!(bag.indices, vec![0, 1, 2, 3, 4, 5]);
        let plane = 4usize;
        for (n, &i) in bag.indices.iter().enumerate() {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(5);
            let sample = bag.sample(n);
            for p in 0..plane {
                assert_eq!(sample[p * 3], sv.slice(prev)[p], "prev channel");
                assert_eq!(sample[p * 3 + 1], sv.slice(i)[p], "curr channel");
                assert_eq!(sample[p * 3 + 2], sv.slice(next)[p], "next channel");
            }
        }
    }

    #[test]
    fn sample_slices_requires_normalised_input() {
        let sv = small_stack(vec![0.0; 8], 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_slices(&sv, 2, &mut rng),
            Err(StraightenError::NotNormalized(_))
        ));
    }

    #[test]
    fn reslice_matches_the_shape_and_value_contract() {
        // Shape oracle: input (S=2, H=3, W=4) -> Yz gives (4, 2, 3).
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let sv = small_stack(data, 2, 3, 4);
        let yz = reslice(&sv, ResliceAxis::Yz);
        assert_eq!((yz.slices(), yz.height(), yz.width()), (4, 2, 3));
        for s in 0..4 {
            for h in 0..2 {
                for w in 0..3 {
                    assert_eq!(yz.at(s, h, w), sv.at(h, w, s), "Yz mapping at ({s},{h},{w})");
                }
            }
        }
        let xz = reslice(&sv, ResliceAxis::Xz);
        assert_eq!((xz.slices(), xz.height(), xz.width()), (3, 4, 2));
        for s in 0..3 {
            for h in 0..4 {
                for w in 0..2 {
                    assert_eq!(xz.at(s, h, w), sv.at(w, s, h), "Xz mapping at ({s},{h},{w})");
                }
            }
        }

        // Xy is the identity; Xz undoes Yz exactly.
        assert_eq!(reslice(&sv, ResliceAxis::Xy), sv);
        assert_eq!(reslice(&yz, ResliceAxis::Xz), sv);
    }

    #[test]
    fn straightened_volume_io_round_trip_preserves_normalisation_state() {
        let dir = std::env::temp_dir().join("aortamil_straighten_io");
        std::fs::create_dir_all(&dir).unwrap();

        let raw = small_stack(vec![-1024.0, 300.0, -600.0, 80.0, 1800.0, -1024.0], 1, 2, 3);
        let raw_path = dir.join("scan_raw.mhd");
        raw.save(&raw_path).unwrap();
        let raw_back = StraightenedVolume::load(&raw_path).unwrap();
        assert!(!raw_back.is_normalized());
        assert_eq!(raw_back.source_id(), "scan_raw");
        assert_eq!(raw_back.data(), raw.data());

        let norm = clip_and_scale(raw).unwrap();
        let norm_path = dir.join("scan_norm.mhd");
        norm.save(&norm_path).unwrap();
        let norm_back = StraightenedVolume::load(&norm_path).unwrap();
        assert!(norm_back.is_normalized());
        assert_eq!(norm_back.data(), norm.data());

        std::fs::remove_dir_all(&dir).ok();
    }
}
