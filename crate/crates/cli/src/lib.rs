//! Command-line pipeline for aortic-CT straightening and slice-bag
//! classification.
//!
//! The binary (`aortamil`) is a thin wrapper over this library: [`config`]
//! holds the layered configuration (file, environment, flags), [`synth`]
//! generates phantom cohorts with known ground truth, and [`commands`]
//! implements the subcommands over the documented file formats. Integration
//! tests drive the same entry points in-process.

pub mod commands;
pub mod config;
pub mod synth;
