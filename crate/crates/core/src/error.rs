//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor math, model code, data handling and I/O.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: dimension mismatch, lhs shape {lhs:?} vs rhs shape {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values or other numeric failures.
    #[error("{op}: numeric error: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk data (bad magic, version, truncation).
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CoreError::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Numeric {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        CoreError::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
