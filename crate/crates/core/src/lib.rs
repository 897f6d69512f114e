//! Core library for an aortic-CT analysis pipeline.
//!
//! The crate covers the full path from raw CT volumes to patient-level
//! predictions:
//!
//! * [`volume`] — 3-D scalar volumes with world/voxel transforms, trilinear
//!   sampling, and a MetaImage-compatible on-disk format.
//! * [`centerline`] — ordering, smoothing, resampling, and framing of aortic
//!   centerlines (rotation-minimising frames).
//! * [`straighten`] — curved planar reformation of the aorta into a
//!   straightened stack, intensity normalisation, slice sampling, and axis
//!   reslicing.
//! * [`cohort`] — cohort records, aortic-HU histogram matching, and
//!   patient-level train/validation splits.
//! * [`reports`] — radiology report sectioning and keyword screening for weak
//!   labels.
//! * [`milnet`] — a from-scratch convolutional multiple-instance classifier
//!   with a trainable adaptive pooling exponent.
//! * [`eval`] — ROC/AUC computation and stratified bootstrap confidence
//!   intervals.
//!
//! All randomised operations take explicit seeds and produce identical results
//! regardless of thread count; [`seed`] provides the stage/item seed
//! derivation used across the pipeline.

pub mod centerline;
pub mod cohort;
pub mod eval;
pub mod milnet;
pub mod reports;
pub mod seed;
pub mod straighten;
pub(crate) mod vec3;
pub mod volume;
