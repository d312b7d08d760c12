//! Command-line harness: run configuration, checkpoints and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;

pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
