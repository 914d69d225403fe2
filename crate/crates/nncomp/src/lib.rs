//! Std companion to `nncomp-core`: dataset ingest and fetch, the NNCM
//! container, experiment configs and the pipeline harness.

pub mod config;
pub mod error;
pub mod fetch;
pub mod harness;
pub mod ingest;
pub mod store;

pub use config::{ExperimentConfig, Stage};
pub use error::{Error, Result};
pub use harness::{MetricsRow, Report, Runner};
pub use nncomp_core as core;

use std::path::PathBuf;

/// `NNCOMP_DATA_DIR` if set, else `./data`.
pub fn default_data_root() -> PathBuf {
    std::env::var_os("NNCOMP_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}
