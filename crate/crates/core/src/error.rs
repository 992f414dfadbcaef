use std::io;

/// Errors produced anywhere in the simulation pipeline.
///
/// The variants mirror the failure classes the command-line front end turns
/// into distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied inconsistent or out-of-range input.
    #[error("input error: {0}")]
    Input(String),
    /// A file did not parse: bad magic, wrong version, truncated payload.
    #[error("format error: {0}")]
    Format(String),
    /// Reconstruction produced too little usable data.
    #[error("quality error: {0}")]
    Quality(String),
    /// A reference (asset id, map path) could not be resolved.
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
