//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

/// Errors surfaced by tensor ops, model code, and the diagnostic suites.
///
/// Non-finite values are an error everywhere in this crate: every op checks
/// its output and refuses to hand a NaN/Inf downstream.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two shapes that an op required to be conformable were not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// An argument violated a documented precondition.
    InvalidArg { op: &'static str, msg: String },
}

impl CoreError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::InvalidArg {
            op,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            CoreError::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
