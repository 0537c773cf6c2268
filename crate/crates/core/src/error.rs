use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("feature dimension mismatch: expected {expected}, found {found} (item {item})")]
    DimensionMismatch {
        item: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("degenerate feature row for item {0}: zero norm")]
    DegenerateFeature(usize),

    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 usage, 3 data error, 4 convergence failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence { .. } | Error::Divergence { .. } => 4,
            Error::InvalidParameter(_) => 2,
            _ => 3,
        }
    }

    /// Short machine-readable category used in the single-line CLI error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyDataset => "empty_dataset",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::UnknownId(_) => "unknown_id",
            Error::DegenerateFeature(_) => "degenerate_feature",
            Error::DegenerateEmbedding => "degenerate_embedding",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Contract(_) => "contract",
            Error::Convergence { .. } => "convergence",
            Error::Divergence { .. } => "divergence",
            Error::Schema(_) => "schema",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
