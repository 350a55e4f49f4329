//! Proposal-quality machinery for two-stage detectors.

pub mod annotations;
pub mod boxgeom;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tiler;
pub mod training;

pub use error::{Error, Result};
