use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("offset of {offset} mm is degenerate for this path: {reason}")]
    DegenerateOffset { offset: f64, reason: String },

    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: &'static str, detail: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dataset split failed: {0}")]
    Split(String),

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// by a failure during the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Split(_)
        )
    }
}
