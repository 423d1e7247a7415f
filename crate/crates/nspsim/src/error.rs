use thiserror::Error;

/// Errors produced by the simulator, policy, and training code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraint.
    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    /// An input is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions do not match.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in an invalid sequence (e.g. step after done).
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value appeared where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized document is malformed, truncated, or from a different spec.
    #[error("format error: {0}")]
    Format(String),

    /// An instance exceeds a hard enumeration guard.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
