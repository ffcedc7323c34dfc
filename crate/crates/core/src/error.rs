//! Crate-wide error type. Every fallible operation returns [`Result`];
//! variants are grouped by failure class so callers (the CLI in
//! particular) can map them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that must agree do not; `context` names the operation and,
    /// where relevant, the layer index.
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values, invalid temperatures, probe failures and the like.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A vector whose norm is required to be positive turned out zero.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A word is missing from the closed toy vocabulary.
    #[error("out-of-vocabulary word: {word:?}")]
    Vocabulary { word: String },

    /// A caption template could not be instantiated.
    #[error("template error: {0}")]
    Template(String),

    /// Invalid configuration (bad boundary, unknown key, inconsistent flow).
    #[error("configuration error: {0}")]
    Config(String),

    /// Benchmark-protocol violation (too few classes, empty split, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite loss; the message names the step.
    #[error("non-finite loss: {0}")]
    NanAbort(String),

    /// A checkpoint or dataset file failed to parse.
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
