//! MEG dipole source localization.
//!
//! * [`forward`]: synthetic sensor helmet and source grid, analytic
//!   fixed-orientation lead field, noisy recordings at a Frobenius SNR.
//! * [`signal`] / [`dataset`]: correlated sinusoid-mixture sources and
//!   labeled training data, materialized or streamed.
//! * [`subspace`]: MUSIC and RAP-MUSIC scanning.
//! * [`nn`]: dense and space-time convolutional regressors trained with SGD.
//! * [`eval`]: Monte-Carlo sweeps, robustness and timing benchmarks.
//!
//! Data-parallel loops use rayon behind the default `parallel` feature and
//! fall back to sequential iteration without it; results are identical.

mod binio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forward;
pub mod nn;
pub mod par;
pub mod rng;
pub mod signal;
pub mod subspace;

pub use error::{Error, Result};
