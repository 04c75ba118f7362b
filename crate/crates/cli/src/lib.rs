//! Config-driven front end to `ddsde-core`: runs engines and diagnostics,
//! writes checksummed artifacts, compares runs and renders reports.
//!
//! Exit codes: 0 success, 1 a requested assertion failed, 2 invalid input
//! (config, arguments, corrupt run directory) or an engine error.

pub mod compare;
pub mod config;
pub mod manifest;
pub mod report;
pub mod run;

use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    /// Field-level validation messages.
    Invalid(Vec<String>),
    /// Missing or tampered run directory contents.
    Corrupt(String),
    Engine(String),
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        2
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Invalid(msgs) => {
                write!(f, "invalid config:")?;
                for m in msgs {
                    write!(f, "\n  {m}")?;
                }
                Ok(())
            }
            Self::Corrupt(m) => write!(f, "corrupt run directory: {m}"),
            Self::Engine(m) => write!(f, "{m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ddsde_core::Error> for CliError {
    fn from(e: ddsde_core::Error) -> Self {
        match e {
            ddsde_core::Error::UnknownDrift { .. } => Self::Invalid(vec![e.to_string()]),
            other => Self::Engine(other.to_string()),
        }
    }
}
