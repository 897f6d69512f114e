//! Aortic centerline extraction, smoothing, and framing.
//!
//! The pipeline receives centerlines either as voxel masks (one marked voxel
//! per sample, forming a simple path) or as plain-text polylines. This module
//! orders mask voxels head-to-tail, smooths and resamples the result at a
//! uniform arc-length step, and attaches a rotation-minimising frame to every
//! sample so cross-sections can be extracted without the twisting artefacts a
//! Frenet frame would introduce near straight segments.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::vec3::{self, Vec3};
use crate::volume::Volume3D;

/// Default smoothing window (samples) for [`smooth_and_resample`].
pub const DEFAULT_SMOOTH_WINDOW: usize = 5;
/// Default arc-length step in millimetres; matches the in-plane resolution of
/// the straightened stacks.
pub const DEFAULT_STEP_MM: f64 = 0.7;

/// Errors from centerline ordering, resampling, framing, or IO.
#[derive(Debug, Error)]
pub enum CenterlineError {
    #[error("centerline mask contains no voxels above threshold")]
    EmptyMask,
    #[error("centerline mask has only {0} voxel(s); at least 2 are required")]
    TooFewVoxels(usize),
    #[error("centerline mask branches at voxel {at:?} (degree {degree})")]
    Branching { at: [usize; 3], degree: usize },
    #[error("centerline mask has no endpoints (closed loop)")]
    NoEndpoints,
    #[error("centerline mask is not a single path: found {endpoints} endpoint voxels")]
    MultiplePaths { endpoints: usize },
    #[error("centerline mask is disconnected: walked {visited} of {total} voxels")]
    Disconnected { visited: usize, total: usize },
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline point {0} is not finite")]
    NonFinitePoint(usize),
    #[error("polyline points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("resample step must be finite and > 0, got {0}")]
    BadStep(f64),
    #[error("smoothing window must be odd and >= 1, got {0}")]
    BadWindow(usize),
    #[error("centerline is too short to resample: length {length_mm} mm at step {step_mm} mm")]
    TooShort { length_mm: f64, step_mm: f64 },
    #[error("degenerate tangent at sample {0}")]
    DegenerateTangent(usize),
    #[error("centerline step between samples {0} and {1} is inconsistent with step_mm")]
    InconsistentStep(usize, usize),
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad polyline line {line} in {path}: {reason}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// An ordered, head-to-tail sequence of world-space points.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Vec3>,
}

impl Polyline {
    /// Validates point count, finiteness, and that consecutive points are
    /// distinct.
    pub fn new(points: Vec<Vec3>) -> Result<Self, CenterlineError> {
        if points.len() < 2 {
            return Err(CenterlineError::TooFewPoints(points.len()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CenterlineError::NonFinitePoint(i));
            }
        }
        for i in 1..points.len() {
            if vec3::norm(vec3::sub(points[i], points[i - 1])) < 1e-9 {
                return Err(CenterlineError::DuplicatePoint(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Total arc length (sum of segment chords) in millimetres.
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| vec3::norm(vec3::sub(w[1], w[0])))
            .sum()
    }

    /// Loads a polyline from a text file with one `x y z` triple per line.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn load_txt(path: &Path) -> Result<Self, CenterlineError> {
        let text = std::fs::read_to_string(path).map_err(|source| CenterlineError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut points = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(CenterlineError::ParseLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: format!("expected 3 coordinates, got {}", parts.len()),
                });
            }
            let mut p = [0f64; 3];
            for (axis, part) in parts.iter().enumerate() {
                p[axis] = part.parse().map_err(|_| CenterlineError::ParseLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: format!("bad coordinate {part:?}"),
                })?;
            }
            points.push(p);
        }
        Self::new(points)
    }

    /// Writes the polyline in the format accepted by [`Polyline::load_txt`].
    pub fn save_txt(&self, path: &Path) -> Result<(), CenterlineError> {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, out).map_err(|source| CenterlineError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A smoothed centerline resampled at a uniform arc-length step.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    points: Vec<Vec3>,
    step_mm: f64,
}

impl Centerline {
    /// Validates that consecutive samples are distinct and no further apart
    /// than `step_mm` (chords across smoothed corners may be shorter).
    pub fn new(points: Vec<Vec3>, step_mm: f64) -> Result<Self, CenterlineError> {
        if !step_mm.is_finite() || step_mm <= 0.0 {
            return Err(CenterlineError::BadStep(step_mm));
        }
        if points.len() < 2 {
            return Err(CenterlineError::TooFewPoints(points.len()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CenterlineError::NonFinitePoint(i));
            }
        }
        for i in 1..points.len() {
            let d = vec3::norm(vec3::sub(points[i], points[i - 1]));
            if d < 1e-9 || d > step_mm * (1.0 + 1e-6) {
                return Err(CenterlineError::InconsistentStep(i - 1, i));
            }
        }
        Ok(Self { points, step_mm })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step_mm(&self) -> f64 {
        self.step_mm
    }
}

/// An orthonormal right-handed frame attached to one centerline sample.
///
/// `tangent` points down the vessel; `normal` and `binormal` span the
/// cross-section plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub tangent: Vec3,
    pub normal: Vec3,
    pub binormal: Vec3,
}

/// One frame per centerline sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameField {
    frames: Vec<Frame>,
}

impl FrameField {
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

const NEIGHBOUR_OFFSETS: [[i64; 3]; 26] = build_offsets();

const fn build_offsets() -> [[i64; 3]; 26] {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
}

/// Orders the marked voxels of a centerline mask into a head-to-tail polyline
/// of world-space voxel centers.
///
/// Voxels with value strictly above `threshold` are considered marked. They
/// must form a single simple path under 26-connectivity: exactly two voxels
/// with one marked neighbour (the endpoints) and every other voxel with two.
/// The walk starts at the endpoint with the smallest z, breaking ties by
/// smaller y then smaller x, so the ordering is fully deterministic.
pub fn order_centerline_voxels(
    mask: &Volume3D,
    threshold: f32,
) -> Result<Polyline, CenterlineError> {
    let dims = mask.dims();
    let mut marked: Vec<[usize; 3]> = Vec::new();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if mask.at(i, j, k) > threshold {
                    marked.push([i, j, k]);
                }
            }
        }
    }
    if marked.is_empty() {
        return Err(CenterlineError::EmptyMask);
    }
    if marked.len() < 2 {
        return Err(CenterlineError::TooFewVoxels(marked.len()));
    }

    let set: HashSet<[usize; 3]> = marked.iter().copied().collect();
    let neighbours = |v: [usize; 3]| -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for off in NEIGHBOUR_OFFSETS {
            let q = [
                v[0] as i64 + off[0],
                v[1] as i64 + off[1],
                v[2] as i64 + off[2],
            ];
            if q.iter().any(|&c| c < 0) {
                continue;
            }
            let q = [q[0] as usize, q[1] as usize, q[2] as usize];
            if q[0] < dims[0] && q[1] < dims[1] && q[2] < dims[2] && set.contains(&q) {
                out.push(q);
            }
        }
        out
    };

    let mut endpoints: Vec<[usize; 3]> = Vec::new();
    for &v in &marked {
        let deg = neighbours(v).len();
        match deg {
            0 => {
                return Err(CenterlineError::Disconnected {
                    visited: 1,
                    total: marked.len(),
                })
            }
            1 => endpoints.push(v),
            2 => {}
            d => return Err(CenterlineError::Branching { at: v, degree: d }),
        }
    }
    match endpoints.len() {
        0 => return Err(CenterlineError::NoEndpoints),
        2 => {}
        n => return Err(CenterlineError::MultiplePaths { endpoints: n }),
    }

    // Deterministic start: smallest z, then y, then x.
    endpoints.sort_by_key(|v| (v[2], v[1], v[0]));
    let start = endpoints[0];

    let mut ordered = Vec::with_capacity(marked.len());
    let mut prev: Option<[usize; 3]> = None;
    let mut current = start;
    loop {
        ordered.push(current);
        let next = neighbours(current)
            .into_iter()
            .find(|&q| Some(q) != prev);
        match next {
            Some(q) => {
                prev = Some(current);
                current = q;
            }
            None => break,
        }
    }
    if ordered.len() != marked.len() {
        return Err(CenterlineError::Disconnected {
            visited: ordered.len(),
            total: marked.len(),
        });
    }

    let points = ordered
        .into_iter()
        .map(|v| mask.voxel_to_world([v[0] as f64, v[1] as f64, v[2] as f64]))
        .collect();
    Polyline::new(points)
}

/// Smooths a polyline with a centered moving average and resamples it at a
/// uniform arc-length step.
///
/// The averaging window shrinks symmetrically near the ends (radius
/// `min(window/2, i, n-1-i)`), so the first and last points are preserved.
/// Resampling places `floor(L / step) + 1` points at arc positions
/// `0, step, 2*step, ...` along the smoothed polyline; a trailing remainder
/// shorter than one step is dropped.
pub fn smooth_and_resample(
    polyline: &Polyline,
    step_mm: f64,
    window: usize,
) -> Result<Centerline, CenterlineError> {
    if !step_mm.is_finite() || step_mm <= 0.0 {
        return Err(CenterlineError::BadStep(step_mm));
    }
    if window == 0 || window % 2 == 0 {
        return Err(CenterlineError::BadWindow(window));
    }
    let pts = polyline.points();
    let n = pts.len();
    let half = window / 2;
    let mut smoothed: Vec<Vec3> = Vec::with_capacity(n);
    for i in 0..n {
        let r = half.min(i).min(n - 1 - i);
        let mut acc = [0f64; 3];
        for p in &pts[i - r..=i + r] {
            acc = vec3::add(acc, *p);
        }
        smoothed.push(vec3::scale(acc, 1.0 / (2 * r + 1) as f64));
    }

    // Cumulative arc length over the smoothed polyline. Smoothing can collapse
    // segments to (near) zero length; those contribute nothing and are skipped
    // during interpolation.
    let mut cumulative = Vec::with_capacity(n);
    let mut total = 0.0;
    cumulative.push(0.0);
    for w in smoothed.windows(2) {
        total += vec3::norm(vec3::sub(w[1], w[0]));
        cumulative.push(total);
    }
    let count = (total / step_mm + 1e-9).floor() as usize + 1;
    if count < 2 {
        return Err(CenterlineError::TooShort {
            length_mm: total,
            step_mm,
        });
    }

    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for s in 0..count {
        let target = (s as f64 * step_mm).min(total);
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 {
            (target - cumulative[seg]) / seg_len
        } else {
            0.0
        };
        let a = smoothed[seg];
        let b = smoothed[seg + 1];
        out.push(vec3::add(a, vec3::scale(vec3::sub(b, a), t)));
    }
    Centerline::new(out, step_mm)
}

fn reflect(v: Vec3, axis: Vec3, c: f64) -> Vec3 {
    vec3::sub(v, vec3::scale(axis, 2.0 / c * vec3::dot(axis, v)))
}

/// Computes a rotation-minimising frame at every centerline sample.
///
/// Tangents come from central differences (one-sided at the ends). The first
/// normal is world `+x` projected onto the plane perpendicular to the first
/// tangent, falling back to `+y` when the tangent is (nearly) parallel to
/// `+x`. Subsequent normals are propagated with the double-reflection method,
/// which transports the frame along the curve with no spurious twist.
pub fn compute_frames(centerline: &Centerline) -> Result<FrameField, CenterlineError> {
    let pts = centerline.points();
    let n = pts.len();

    let mut tangents: Vec<Vec3> = Vec::with_capacity(n);
    for i in 0..n {
        let d = if i == 0 {
            vec3::sub(pts[1], pts[0])
        } else if i == n - 1 {
            vec3::sub(pts[n - 1], pts[n - 2])
        } else {
            vec3::sub(pts[i + 1], pts[i - 1])
        };
        tangents.push(vec3::normalize(d).ok_or(CenterlineError::DegenerateTangent(i))?);
    }

    let t0 = tangents[0];
    let pick_initial_normal = |candidate: Vec3| -> Option<Vec3> {
        let proj = vec3::sub(candidate, vec3::scale(t0, vec3::dot(candidate, t0)));
        let len = vec3::norm(proj);
        if len < 1e-6 {
            None
        } else {
            Some(vec3::scale(proj, 1.0 / len))
        }
    };
    let n0 = pick_initial_normal([1.0, 0.0, 0.0])
        .or_else(|| pick_initial_normal([0.0, 1.0, 0.0]))
        .ok_or(CenterlineError::DegenerateTangent(0))?;

    let mut frames = Vec::with_capacity(n);
    frames.push(Frame {
        tangent: t0,
        normal: n0,
        binormal: vec3::cross(t0, n0),
    });

    for i in 0..n - 1 {
        let r_i = frames[i].normal;
        let t_i = frames[i].tangent;
        let t_next = tangents[i + 1];

        // First reflection: across the bisecting plane of p_i and p_{i+1}.
        let v1 = vec3::sub(pts[i + 1], pts[i]);
        let c1 = vec3::dot(v1, v1);
        let (r_l, t_l) = if c1 > 1e-18 {
            (reflect(r_i, v1, c1), reflect(t_i, v1, c1))
        } else {
            (r_i, t_i)
        };
        // Second reflection: maps the reflected tangent onto the next tangent.
        let v2 = vec3::sub(t_next, t_l);
        let c2 = vec3::dot(v2, v2);
        let mut r_next = if c2 > 1e-18 { reflect(r_l, v2, c2) } else { r_l };

        // Re-orthonormalise against accumulated floating-point drift.
        r_next = vec3::sub(r_next, vec3::scale(t_next, vec3::dot(r_next, t_next)));
        r_next = vec3::normalize(r_next).ok_or(CenterlineError::DegenerateTangent(i + 1))?;
        frames.push(Frame {
            tangent: t_next,
            normal: r_next,
            binormal: vec3::cross(t_next, r_next),
        });
    }
    Ok(FrameField { frames })
}

/// Mean intensity (HU) of trilinear samples taken at every centerline point.
///
/// Points falling outside the volume contribute the volume's fill value, so a
/// centerline that escapes the scan drags the mean towards air.
pub fn mean_centerline_hu(vol: &Volume3D, centerline: &Centerline) -> f64 {
    let sum: f64 = centerline
        .points()
        .iter()
        .map(|&p| f64::from(vol.sample_trilinear(p)))
        .sum();
    sum / centerline.len() as f64
}
