//! Command-line runner: configuration, run directories, caches and reports.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod rundir;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
