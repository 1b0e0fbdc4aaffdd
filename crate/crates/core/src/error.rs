use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A point or value outside the domain of a function (NaN, infinity).
    #[error("domain error: {0}")]
    Domain(String),

    /// Evaluation produced a non-finite result.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// An ODE flow failed along a specific cubature path.
    #[error("flow along path {path} failed: {reason}")]
    Flow { path: usize, reason: String },

    /// The requested flow method does not apply to the given path or model.
    #[error("method error: {0}")]
    Method(String),

    /// The requested feature is outside what this implementation supports.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A full-tree evaluation would exceed its leaf budget.
    #[error(
        "full-tree evaluation needs {leaves} leaves, over the budget of {budget}; \
         use a Monte-Carlo plan with at least {suggested_samples} samples"
    )]
    Budget {
        leaves: f64,
        budget: u64,
        suggested_samples: u64,
    },

    /// Malformed serialized input.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
