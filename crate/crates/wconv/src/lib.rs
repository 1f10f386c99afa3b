//! Density-weighted convolution micro-framework.
//!
//! Implements standard and density-weighted 2D convolution (a rank-1 spatial
//! density `phi = alpha * alpha^T` multiplied elementwise into the kernel),
//! analytic gradients for every layer, small CNN recipes for classification
//! and denoising, a full image-quality metric suite, and an experiment
//! harness that sweeps the density coefficients and writes CSV reports.
//!
//! The `wconv` binary exposes the harness: `train`, `sweep`, `bench`,
//! `metrics`, and `selftest` subcommands.

pub mod conv;
pub mod data;
pub mod density;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
