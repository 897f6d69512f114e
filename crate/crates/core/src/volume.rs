//! 3-D scalar volumes with physical-space metadata.
//!
//! A [`Volume3D`] stores a dense grid of 32-bit floats (CT attenuation in
//! Hounsfield units, or normalised intensities) together with an axis-aligned
//! affine mapping between voxel indices and world millimetres. Voxel `(0,0,0)`
//! has its *center* at `origin`; neighbouring centers are `spacing` apart.
//!
//! On disk a volume is a MetaImage-compatible pair: a small text header
//! (`.mhd`) and a raw little-endian float32 file, x-fastest. Saving and
//! re-loading reproduces the volume bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors from volume construction, IO, or header parsing.
#[derive(Debug, Error)]
pub enum VolumeError {
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
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("unsupported element type {found:?} in {path} (only MET_FLOAT is supported)")]
    UnsupportedElementType { path: PathBuf, found: String },
    #[error("raw data size mismatch in {path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("volume dims must all be >= 1, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("volume spacing must be finite and > 0, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("volume origin must be finite, got {0:?}")]
    InvalidOrigin([f64; 3]),
    #[error("fill value must be finite, got {0}")]
    InvalidFillValue(f32),
    #[error("data length {actual} does not match dims {dims:?} (expected {expected})")]
    DataLenMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("volume data contains a non-finite value at linear index {0}")]
    NonFiniteData(usize),
    #[error("volume path {0} must end in .mhd")]
    BadExtension(PathBuf),
}

/// Default intensity reported for samples outside the volume: air in HU.
pub const DEFAULT_FILL_VALUE: f32 = -1024.0;

/// A dense 3-D float volume in physical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    fill_value: f32,
    data: Vec<f32>,
}

impl Volume3D {
    /// Builds a volume, validating dims, spacing, data length, and finiteness.
    ///
    /// `data` is ordered x-fastest: index `(i, j, k)` lives at
    /// `i + dims[0] * (j + dims[1] * k)`.
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        fill_value: f32,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidOrigin(origin));
        }
        if !fill_value.is_finite() {
            return Err(VolumeError::InvalidFillValue(fill_value));
        }
        let expected = dims[0]
            .checked_mul(dims[1])
            .and_then(|n| n.checked_mul(dims[2]))
            .ok_or(VolumeError::InvalidDims(dims))?;
        if data.len() != expected {
            return Err(VolumeError::DataLenMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteData(bad));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            fill_value,
            data,
        })
    }

    /// A volume filled with a constant value.
    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        value: f32,
    ) -> Result<Self, VolumeError> {
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|n| n.checked_mul(dims[2]))
            .ok_or(VolumeError::InvalidDims(dims))?;
        Self::new(dims, spacing, origin, DEFAULT_FILL_VALUE, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn fill_value(&self) -> f32 {
        self.fill_value
    }

    pub fn set_fill_value(&mut self, v: f32) -> Result<(), VolumeError> {
        if !v.is_finite() {
            return Err(VolumeError::InvalidFillValue(v));
        }
        self.fill_value = v;
        Ok(())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the volume, returning its data buffer.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Linear index of voxel `(i, j, k)`; x-fastest layout.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// World millimetres of a (possibly fractional) voxel coordinate.
    pub fn voxel_to_world(&self, c: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + c[0] * self.spacing[0],
            self.origin[1] + c[1] * self.spacing[1],
            self.origin[2] + c[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a world-space point.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Trilinear sample at a world-space point.
    ///
    /// The supported region is the voxel-*center* hull: continuous voxel
    /// coordinates in `[0, n-1]` on each axis. Outside it (or for a
    /// non-finite query point) the volume's `fill_value` is returned, so
    /// callers never see extrapolated intensities.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f32 {
        if p.iter().any(|v| !v.is_finite()) {
            return self.fill_value;
        }
        let c = self.world_to_voxel(p);
        let mut i0 = [0usize; 3];
        let mut frac = [0f64; 3];
        for axis in 0..3 {
            let n = self.dims[axis];
            let hi = (n - 1) as f64;
            // The hull boundary is inclusive; a sub-nanovoxel snap absorbs
            // the rounding of the world -> voxel affine round trip so that
            // points exactly on a face still sample instead of filling.
            const SNAP: f64 = 1e-9;
            if c[axis] < -SNAP || c[axis] > hi + SNAP {
                return self.fill_value;
            }
            let x = c[axis].clamp(0.0, hi);
            if n == 1 {
                // Single-plane axis: x is exactly 0 here.
                i0[axis] = 0;
                frac[axis] = 0.0;
            } else {
                let mut lo = x.floor() as usize;
                // x == n-1 lands on the last center; interpolate from the
                // previous cell with fraction 1 so the value is still exact.
                if lo >= n - 1 {
                    lo = n - 2;
                }
                i0[axis] = lo;
                frac[axis] = x - lo as f64;
            }
        }
        let i1 = [
            (i0[0] + 1).min(self.dims[0] - 1),
            (i0[1] + 1).min(self.dims[1] - 1),
            (i0[2] + 1).min(self.dims[2] - 1),
        ];
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let mut acc = 0f64;
        for (kz, wz) in [(i0[2], 1.0 - fz), (i1[2], fz)] {
            if wz == 0.0 {
                continue;
            }
            for (ky, wy) in [(i0[1], 1.0 - fy), (i1[1], fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (kx, wx) in [(i0[0], 1.0 - fx), (i1[0], fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * f64::from(self.at(kx, ky, kz));
                }
            }
        }
        acc as f32
    }

    /// Loads a volume from a `.mhd` header and its raw data file.
    pub fn load(path: &Path) -> Result<Self, VolumeError> {
        let text = std::fs::read_to_string(path).map_err(|source| VolumeError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let header = parse_header(path, &text)?;
        let raw_path = match path.parent() {
            Some(dir) if !dir.as_os_str().is_empty() => dir.join(&header.data_file),
            _ => PathBuf::from(&header.data_file),
        };
        let bytes = std::fs::read(&raw_path).map_err(|source| VolumeError::Read {
            path: raw_path.clone(),
            source,
        })?;
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if bytes.len() != n * 4 {
            return Err(VolumeError::SizeMismatch {
                path: raw_path,
                expected: n * 4,
                actual: bytes.len(),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(
            header.dims,
            header.spacing,
            header.offset,
            header.fill_value,
            data,
        )
    }

    /// Saves the volume as `<path>` (must end in `.mhd`) plus a sibling
    /// `.raw` file with the same stem. Loading the pair back reproduces the
    /// volume bit for bit.
    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        if path.extension().and_then(|e| e.to_str()) != Some("mhd") {
            return Err(VolumeError::BadExtension(path.to_path_buf()));
        }
        let raw_path = path.with_extension("raw");
        let raw_name = raw_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| VolumeError::BadExtension(path.to_path_buf()))?
            .to_owned();

        let mut header = String::new();
        let _ = writeln!(header, "NDims = 3");
        let _ = writeln!(
            header,
            "DimSize = {} {} {}",
            self.dims[0], self.dims[1], self.dims[2]
        );
        let _ = writeln!(
            header,
            "ElementSpacing = {} {} {}",
            self.spacing[0], self.spacing[1], self.spacing[2]
        );
        let _ = writeln!(
            header,
            "Offset = {} {} {}",
            self.origin[0], self.origin[1], self.origin[2]
        );
        let _ = writeln!(header, "ElementType = MET_FLOAT");
        let _ = writeln!(header, "FillValue = {}", self.fill_value);
        let _ = writeln!(header, "ElementDataFile = {raw_name}");
        std::fs::write(path, header).map_err(|source| VolumeError::Write {
            path: path.to_path_buf(),
            source,
        })?;

        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&raw_path, bytes).map_err(|source| VolumeError::Write {
            path: raw_path.clone(),
            source,
        })
    }
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    offset: [f64; 3],
    fill_value: f32,
    data_file: String,
}

fn malformed(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3], VolumeError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(malformed(path, format!("{key} needs 3 values, got {:?}", value)));
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse()
                .map_err(|_| malformed(path, format!("bad number {p:?} in {key}")))?,
        );
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

fn parse_header(path: &Path, text: &str) -> Result<Header, VolumeError> {
    let mut dims = None;
    let mut spacing = None;
    let mut offset = [0.0f64; 3];
    let mut fill_value = DEFAULT_FILL_VALUE;
    let mut element_type = None;
    let mut data_file = None;
    let mut ndims_ok = false;

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("line {}: expected 'Key = value'", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(malformed(path, format!("NDims must be 3, got {value:?}")));
                }
                ndims_ok = true;
            }
            "DimSize" => dims = Some(parse_triple::<usize>(path, key, value)?),
            "ElementSpacing" => spacing = Some(parse_triple::<f64>(path, key, value)?),
            "Offset" => offset = parse_triple::<f64>(path, key, value)?,
            "ElementType" => element_type = Some(value.to_owned()),
            "FillValue" => {
                fill_value = value
                    .parse()
                    .map_err(|_| malformed(path, format!("bad FillValue {value:?}")))?;
            }
            "ElementDataFile" => data_file = Some(value.to_owned()),
            // Unknown keys are ignored so headers written by other MetaImage
            // tools (CompressedData = False, etc.) still load.
            _ => {}
        }
    }

    match element_type.as_deref() {
        Some("MET_FLOAT") => {}
        Some(other) => {
            return Err(VolumeError::UnsupportedElementType {
                path: path.to_path_buf(),
                found: other.to_owned(),
            })
        }
        None => return Err(malformed(path, "missing ElementType")),
    }
    if !ndims_ok {
        return Err(malformed(path, "missing NDims"));
    }
    let dims = dims.ok_or_else(|| malformed(path, "missing DimSize"))?;
    let spacing = spacing.ok_or_else(|| malformed(path, "missing ElementSpacing"))?;
    let data_file = data_file.ok_or_else(|| malformed(path, "missing ElementDataFile"))?;
    if data_file == "LOCAL" {
        return Err(malformed(path, "ElementDataFile = LOCAL is not supported"));
    }
    Ok(Header {
        dims,
        spacing,
        offset,
        fill_value,
        data_file,
    })
}
