use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assembly failed at element {element}: {reason}")]
    AssemblyFailure { element: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("reaction term singular at node {node} (mu2 + phi = 0)")]
    Singularity { node: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite state at time step {step}")]
    Divergence { step: usize },

    #[error("DEIM selection failed at column {column}: basis is rank deficient")]
    SelectionFailure { column: usize },

    #[error("hyperreduction build failed: {0}")]
    HyperreductionBuild(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("interpolation system singular: {0}")]
    Interpolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("archive error: {0}")]
    Archive(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by user input (bad paths, malformed files, bad config)
    /// rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::Archive(_) | Error::Validation(_)
        )
    }
}
