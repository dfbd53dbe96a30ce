use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient in parameter block `{name}`")]
    NonFiniteGradient { name: String },

    #[error("backward called on a tensor that does not depend on any parameter")]
    Detached,

    #[error("batch norm `{0}` used in inference mode before running statistics were initialized")]
    RunningStatsUninitialized(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("search window too small: {eligible} eligible pixels for k = {k} at pixel {pixel}")]
    WindowTooSmall { pixel: usize, eligible: usize, k: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("unsupported image {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
    }
}
