use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },
    #[error("duplicate edge between {0} and {1}")]
    DuplicateEdge(String, String),
    #[error("edge {0}-{1} has nonpositive conductance {2}")]
    NonpositiveConductance(String, String, f64),
    #[error("unknown node id {0:?}")]
    UnknownNode(String),
    #[error("degenerate graph size: {0}")]
    DegenerateSize(String),
    #[error("matrix is not symmetric (max deviation {0:e})")]
    Asymmetric(f64),
    #[error("battery and ground attachment sets overlap at node {0:?}")]
    OverlappingTerminals(String),
    #[error("{0} attachment set is empty")]
    EmptyTerminalSet(&'static str),
    #[error("nodes {0:?} and {1:?} have coincident centroids")]
    CoincidentCentroids(String, String),
    #[error("Laplacian is ill-conditioned: {0} near-zero eigenvalues, expected 1")]
    IllConditioned(usize),
    #[error("reduced voltage system could not be solved: {0}")]
    SolveFailed(String),
    #[error("nonzero numerator over zero denominator at ({0}, {1})")]
    DivideByZero(usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate Gamma mean {mean} at node {node}")]
    DegenerateMean { node: usize, mean: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} draws, got {got}")]
    InsufficientDraws { needed: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::IllConditioned(_)
            | Error::SolveFailed(_)
            | Error::DivideByZero(..)
            | Error::DegenerateMean { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
