use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("virtual scan from viewpoint {viewpoint:?} sees no surface")]
    EmptyScan { viewpoint: [f64; 3] },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown shape kind `{0}`")]
    UnknownShapeKind(String),

    #[error("shape leaves the unit cube margin: {0}")]
    ShapeOutOfBounds(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 for data/format problems, 3 for
    /// numeric divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFinite { .. } => 3,
            Error::Format { .. }
            | Error::Io { .. }
            | Error::CheckpointMismatch(_)
            | Error::Config(_)
            | Error::SequenceTooLong { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
