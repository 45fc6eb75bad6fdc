//! Batch driver for the photon-server library: configuration, simulation,
//! correlation analysis, qualification replay, pulse solving and reports.
//!
//! Exit codes of the `spserver` binary: 0 success, 2 configuration error,
//! 3 I/O error, 4 analysis error.

// Negated float comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
