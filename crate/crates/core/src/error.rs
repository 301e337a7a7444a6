//! Crate-wide error type for contract, shape, and configuration failures.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Tensor or matrix dimensions do not agree.
    Shape(String),
    /// An index (node id, edge endpoint, row, class) is out of range.
    Index(String),
    /// A configuration value is outside its valid domain.
    Config(String),
    /// An API contract was violated (empty row set, double backward, ...).
    Contract(String),
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(msg) => write!(f, "shape error: {msg}"),
            Self::Index(msg) => write!(f, "index error: {msg}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Contract(msg) => write!(f, "contract error: {msg}"),
            Self::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for CoreError {}
