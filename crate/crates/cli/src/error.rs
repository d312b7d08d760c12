//! Command errors and their process exit codes.

use std::fmt;
use std::path::Path;

use ssm_core::Error as CoreError;

/// Stable process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// A check failed (gradcheck) or an unexpected internal error occurred.
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATASET: u8 = 3;
    pub const IO: u8 = 4;
    pub const INCOMPATIBLE: u8 = 5;
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Dataset(String),
    Io(String),
    Incompatible(String),
    CheckFailed(String),
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Dataset(_) => exit::DATASET,
            CliError::Io(_) => exit::IO,
            CliError::Incompatible(_) => exit::INCOMPATIBLE,
            CliError::CheckFailed(_) | CliError::Internal(_) => exit::FAILURE,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Dataset(m) => write!(f, "dataset error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Incompatible(m) => write!(f, "incompatible: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::BadMagic { .. }
            | CoreError::Truncated { .. }
            | CoreError::CountMismatch { .. }
            | CoreError::ZeroVariance
            | CoreError::EmptyDataset => CliError::Dataset(msg),
            CoreError::Io(_) => CliError::Io(msg),
            CoreError::Incompatible(m) => CliError::Incompatible(m),
            _ => CliError::Internal(msg),
        }
    }
}
