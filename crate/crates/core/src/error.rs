use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (shape, finiteness, domain).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An iterative solver exhausted its budget without meeting its criterion.
    #[error("convergence failure: {message} (residual {residual:.3e})")]
    Convergence { message: String, residual: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
