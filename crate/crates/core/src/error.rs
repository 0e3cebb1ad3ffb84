use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("unsupported topology: expected {expected} joints, got {got}")]
    UnsupportedTopology { expected: usize, got: usize },

    #[error("invalid hypergraph: {0}")]
    Hypergraph(String),

    #[error("degenerate depth at frame {frame}, joint {joint} (|w| = {w:e})")]
    DegenerateDepth { frame: usize, joint: usize, w: f64 },

    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),

    #[error("degenerate view pair: {0}")]
    DegeneratePair(String),

    #[error("isolated {kind} {index} in incidence matrix")]
    IsolatedElement { kind: &'static str, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batch composition: {0}")]
    BatchComposition(String),

    #[error("cannot normalize a zero-norm feature vector")]
    Normalization,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::BatchComposition(_) => 2,
            Error::Topology(_)
            | Error::UnsupportedTopology { .. }
            | Error::Hypergraph(_)
            | Error::Protocol(_)
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Io { .. } => 3,
            Error::DegenerateDepth { .. }
            | Error::DegenerateCamera(_)
            | Error::DegeneratePair(_)
            | Error::IsolatedElement { .. }
            | Error::Normalization => 4,
        }
    }
}
