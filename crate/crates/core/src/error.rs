use thiserror::Error;

/// Errors raised by the numerical kernels, oracles and drivers.
#[derive(Debug, Error)]
pub enum TsgError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is singular (pivot {pivot:e} below tolerance)")]
    Singular { pivot: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle does not provide {0}")]
    Unsupported(String),

    #[error("inner solve did not converge: achieved residual {residual:e} (tolerance {tol:e})")]
    InnerNotConverged { residual: f64, tol: f64 },

    #[error("data error at row {row}, column {column}: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TsgError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TsgError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
