use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown op '{0}'")]
    UnknownOp(String),

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {0}")]
    UnknownVersion(u32),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownOp(_) => 1,
            Error::NonFinite(_) | Error::NonScalarLoss(_) => 3,
            Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } => 2,
            Error::Undefined(_)
            | Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::UnknownVersion(_)
            | Error::UnknownDtype(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
