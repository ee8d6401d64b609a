use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CprlError {
    #[error(transparent)]
    Autodiff(#[from] cprl_autodiff::AutodiffError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("output directory {path}: {reason}")]
    Output { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CprlError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            CprlError::InvalidArgument(_) | CprlError::Config(_) => 2,
            CprlError::Checkpoint { .. } => 3,
            CprlError::Output { .. } => 4,
            CprlError::Data(_) | CprlError::Manifest { .. } | CprlError::Csv(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CprlError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CprlError {
    CprlError::InvalidArgument(msg.into())
}
