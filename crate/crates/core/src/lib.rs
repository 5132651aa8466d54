//! Two-stage semantic scene completion on voxel grids: query-conditioned
//! triplanes with Gaussian anchoring for occupancy, then occupancy-gated
//! Gaussian-triplane refinement for semantics.

pub mod ablation;
pub mod anchoring;
pub mod commands;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod gssc;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod refinement;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod triplane;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
