//! Command-line harness: dataset files, run configurations, and JSON reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use error::{CliError, CliResult};
