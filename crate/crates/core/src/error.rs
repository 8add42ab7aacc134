use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("degenerate geometry at panel {panel}: {message}")]
    Geometry { panel: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {last_residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last_residual: f64,
        history: Vec<f64>,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
