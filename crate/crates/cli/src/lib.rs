//! Experiment runner: configuration, training runs, ablations and reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod variant;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
