//! Probabilistic remaining-useful-life (RUL) prediction with deep ensembles.
//!
//! This crate is the allocation-only numerical core. It has no IO and runs
//! under `no_std` with `alloc`:
//!
//! - [`cmapss`] parses CMAPSS run-to-failure records and turns them into
//!   normalized, windowed training samples with piecewise-linear RUL targets.
//! - [`nn`] is a small LSTM network with a Gaussian (mean, variance) head,
//!   exact backpropagation through time, Adam and a training loop.
//! - [`ensemble`] trains independent members, aggregates them as a uniform
//!   Gaussian mixture and splits predictive uncertainty into aleatoric and
//!   epistemic parts.
//! - [`metrics`] holds RMSE, the NASA score, interval coverage/width and a
//!   Gaussian kernel density estimate.
//!
//! File formats, checkpoints and the command line live in the `rulens` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod cmapss;
pub mod ensemble;
mod error;
pub mod math;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
