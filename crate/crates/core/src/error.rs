use nalgebra::DMatrix;
use thiserror::Error;

/// Errors raised by the solvers and simulators in this crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// An input violates an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// The matrix has an eigenvalue on (or numerically near) the imaginary axis.
    #[error("matrix is not dichotomous: eigenvalue with |Re| = {min_abs_real:.3e} within axis tolerance {axis_tol:.1e}")]
    NotDichotomous { min_abs_real: f64, axis_tol: f64 },

    /// A numerical routine failed to converge or produced an invalid result.
    #[error("numeric failure: {message}")]
    NumericFailure {
        message: String,
        matrix: Option<DMatrix<f64>>,
    },

    /// The computational box truncates the solution; retry on the suggested box.
    #[error("box [{lo}, {hi}] too small: {reason}; suggested enlargement [{suggested_lo}, {suggested_hi}]")]
    BoxTooSmall {
        lo: f64,
        hi: f64,
        suggested_lo: f64,
        suggested_hi: f64,
        reason: String,
    },

    /// A simulated trajectory left the enlarged domain.
    #[error("trajectory blow-up in replica {replica} at t = {time:.4}: state {state:?} left the enlarged box")]
    BlowUp {
        replica: usize,
        time: f64,
        state: Vec<f64>,
    },

    /// Too few samples to support a statistical estimate.
    #[error("insufficient samples: {found} found, {required} required ({context})")]
    InsufficientSamples {
        found: usize,
        required: usize,
        context: String,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure {
            message: msg.into(),
            matrix: None,
        }
    }

    pub(crate) fn numeric_with(msg: impl Into<String>, matrix: &DMatrix<f64>) -> Self {
        Error::NumericFailure {
            message: msg.into(),
            matrix: Some(matrix.clone()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
