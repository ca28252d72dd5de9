use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("jacobi iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A buffer was asked for a projector before it filled up.
    #[error("buffer not ready: {fill}/{capacity} entries")]
    NotReady { fill: usize, capacity: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { op, expected, got });
    }
    Ok(())
}

pub(crate) fn ensure_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
