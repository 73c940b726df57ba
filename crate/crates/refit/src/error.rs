//! Error type shared by all modules.

use std::fmt;

#[derive(Debug)]
pub enum RefitError {
    /// An image or block field did not have the shape an operator expects.
    ShapeMismatch { context: &'static str, expected: String, got: String },
    /// A conjugate-gradient solve stalled above its residual target.
    CgDidNotConverge { context: &'static str, residual: f64, iters: usize },
    /// A solver iterate became non-finite.
    NonFiniteIterate { iter: usize },
    /// A parameter failed validation before any work started.
    InvalidParams(String),
    /// A penalty prox needed an anchor with positive norm and got none.
    AnchorRequired(&'static str),
    Io(std::io::Error),
    /// A file did not parse as the format its extension promised.
    Format(String),
}

impl fmt::Display for RefitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefitError::ShapeMismatch { context, expected, got } => {
                write!(f, "{context}: expected {expected}, got {got}")
            }
            RefitError::CgDidNotConverge { context, residual, iters } => {
                write!(f, "{context}: CG did not converge after {iters} iterations (relative residual {residual:.3e})")
            }
            RefitError::NonFiniteIterate { iter } => {
                write!(f, "solver produced a non-finite iterate at iteration {iter}")
            }
            RefitError::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            RefitError::AnchorRequired(kind) => {
                write!(f, "{kind} prox requires an anchor with positive norm")
            }
            RefitError::Io(e) => write!(f, "io error: {e}"),
            RefitError::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for RefitError {}

impl From<std::io::Error> for RefitError {
    fn from(e: std::io::Error) -> Self {
        RefitError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, RefitError>;
