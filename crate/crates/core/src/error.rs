//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or patch-grid dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A parsed file violated its format contract.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A run configuration is missing fields or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN or Inf where finite values are required.
    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: msg.into(),
        }
    }
}
