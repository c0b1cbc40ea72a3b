use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A feature row with zero norm where a direction is required.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    /// Label or index out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Non-finite values produced where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted on a non-finite loss.
    #[error("training diverged: non-finite loss at batch {batch}")]
    Diverged { batch: usize },

    /// Malformed file contents (bad magic, bad version, inconsistent counts).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
