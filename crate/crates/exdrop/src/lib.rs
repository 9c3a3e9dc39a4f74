//! Training harness, file formats and command-line tooling for explicitly
//! regularized transformer encoders.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod train;
pub mod verify;

use std::path::PathBuf;

pub use config::{load_config, RunConfig};
pub use error::{HarnessError, Result};

/// Environment variable naming the root directory for all outputs.
pub const OUTPUT_ENV: &str = "EXDROP_OUT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("exdrop-out"), PathBuf::from)
}

/// A validation error for `field`.
pub fn invalid_config(field: &str, reason: &str) -> HarnessError {
    error::invalid(field, reason)
}
