use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum JumpGridError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation is not available for this input class.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An iterative solver hit its iteration cap.
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Something that the construction should have made impossible.
    #[error("internal error: {0}")]
    Internal(String),

    /// Malformed binary dump.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, JumpGridError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(JumpGridError::Domain(msg.into()))
}
