use std::path::PathBuf;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tensor #{0} is not tracked by the tape (constant or detached)")]
    Detached(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} out of range: {value} (allowed {allowed})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        allowed: String,
    },

    #[error("training diverged at step {step}: running loss {running:.4e} above {factor}x its minimum {minimum:.4e} for {window} steps")]
    Diverged {
        step: usize,
        running: f64,
        minimum: f64,
        factor: f64,
        window: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("reproduction mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this failure class: config=2, numeric=3, io=4,
    /// replay mismatch=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutOfRange { .. } | Error::Json(_) => 2,
            Error::Shape { .. }
            | Error::NonScalarRoot(_)
            | Error::Detached(_)
            | Error::NonFinite(_)
            | Error::Diverged { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Mismatch(_) => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
