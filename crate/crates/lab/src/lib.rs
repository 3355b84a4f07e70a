//! Files, reports and the command line around `sts-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config key `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] sts_core::Error),
}

impl LabError {
    /// Process exit status: 2 for invalid invocations, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Usage(_) | LabError::Schema { .. } | LabError::Syntax(_) => 2,
            _ => 1,
        }
    }
}
