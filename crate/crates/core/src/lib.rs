//! Unbounded-scene neural radiance fields on the CPU.
//!
//! The crate implements the full numerical pipeline: cone casting and
//! contracted-space Gaussian encoding, a density-only proposal network that
//! steers hierarchical sampling, alpha-compositing quadrature, the overlap
//! bound distillation loss, the distortion regularizer, and a deterministic
//! Adam training loop — all verifiable on analytic scenes.

pub mod encoding;
pub mod error;
pub mod geometry;
pub mod histograms;
pub mod check;
pub mod io;
pub mod network;
pub mod runner;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
