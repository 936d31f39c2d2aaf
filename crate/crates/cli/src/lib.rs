//! Command-line shell around `membart-core`: run configuration, checkpoints,
//! metrics logging and the `train`, `eval`, `bench` and `compare-variants`
//! commands.

pub mod app;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use error::{CliError, Result};
