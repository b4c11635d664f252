//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error in {op}: {message}")]
    Dimension { op: String, message: String },

    /// A caller violated an operation's contract (non-scalar loss, bad channel
    /// count, divisibility, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary container or manifest.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Invalid configuration (CLI flags, config file, model/stem combination).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problem (missing split, empty output, channel mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure during optimization (NaN gradient or loss).
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: u64, message: String },

    /// A verification suite found a violated law.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(op: &str, message: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical,
    /// 4 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Verification(_) => 4,
            Error::Dimension { .. } | Error::Contract(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
