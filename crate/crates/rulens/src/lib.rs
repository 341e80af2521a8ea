//! Command-line front end and file formats for `rulens-core`.
//!
//! A run directory holds everything one experiment produces:
//!
//! ```text
//! <out>/dataset/       ingest: manifest.json + arrays.bin
//! <out>/checkpoint/    train: ensemble.json, history.tsv, member_XXX/
//! <out>/evaluation/    evaluate: report.txt, report.json, predictions.tsv
//! <out>/uncertainty/   uncertainty: per-dataset values and densities, summary
//! <out>/predict/       predict: one trace per unit
//! ```
//!
//! Every text output starts with `#` lines naming the command, the
//! fingerprints of its inputs and the resolved config.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod report;
mod util;

pub use util::{exit_code, Provenance, Tsv, UserError};
