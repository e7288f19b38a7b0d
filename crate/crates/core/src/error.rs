use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("backward seed must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarSeed { rows: usize, cols: usize },

    #[error("variable does not belong to this graph")]
    GraphMismatch,

    #[error("critic path contains non piecewise-linear activation {0:?}")]
    NotPiecewiseLinear(crate::ndgrad::Activation),

    #[error("cosine similarity undefined for zero-norm vector ({0})")]
    ZeroNorm(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("diverged at iteration {iter} in {term}: {source}")]
    Diverged {
        iter: usize,
        term: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Dim {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
