//! Crate-wide error type.
//!
//! Three broad failure classes matter to callers: shape/graph misuse
//! (programming errors surfaced as [`Error::Shape`]), bad run configuration
//! ([`Error::Config`], mapped to exit code 2 by the CLI), and numeric
//! breakdown during a run ([`Error::Numeric`], exit code 3).

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes (or axes) incompatible with the requested operation.
    #[error("shape error in `{op}`: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A configuration value failed validation. The message names the field.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure at run time (divergence, non-finite values,
    /// statistics requested before they exist).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An activation that must be binary carried a non-binary value.
    #[error("spike discipline violation in `{module}`: value {value} at flat index {index}")]
    SpikeDiscipline {
        module: String,
        value: f64,
        index: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Helper for shape errors; keeps call sites short.
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::SpikeDiscipline { .. } => 3,
            _ => 1,
        }
    }
}
