use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("degenerate neighborhood around point {0}")]
    DegenerateNeighborhood(usize),

    #[error("vertex with no incident face: {0}")]
    IsolatedVertex(usize),

    #[error("empty neighborhood at point {0}")]
    EmptyNeighborhood(usize),

    #[error("degenerate extent: all points coincide")]
    DegenerateExtent,

    #[error("empty point set")]
    EmptyPointSet,

    #[error("invalid surface: {0}")]
    InvalidSurface(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("singular system")]
    SingularSystem,

    #[error("factorization failed at pivot {0}")]
    FactorizationFailed(usize),

    #[error("uncovered point {0}; increase radius")]
    UncoveredPoint(usize),

    #[error("points {0} and {1} lie in disconnected components; use euclidean distance mode")]
    Disconnected(usize, usize),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{path}: parse error at line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }

    /// Whether the error stems from bad input rather than a numerical failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_input_error(),
            Error::SingularSystem | Error::FactorizationFailed(_) => false,
            _ => true,
        }
    }
}
