//! Crate-wide error type. Every fallible operation returns [`Result`];
//! variants carry enough context to diagnose the failing call site.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes disagree (vector lengths, matrix dims, batch widths).
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Input values violate a precondition (non-finite entries, asymmetry).
    InvalidInput(String),
    /// Iterative solver hit its sweep cap before reaching tolerance.
    Convergence { sweeps: usize, off_norm: f64 },
    /// An estimator was asked for a result before it held enough samples.
    InsufficientSamples { needed: usize, actual: usize },
    /// A batch violates queue or loss constraints (empty, oversized, bad pair).
    InvalidBatch(String),
    /// Configuration rejected by validation.
    InvalidConfig(String),
    /// A numeric invariant failed at runtime (e.g. nonpositive eigenvalue
    /// after jitter).
    NumericalFailure(String),
    /// Optimizer refused a step; carries the first offending parameter index.
    NonFiniteGradient { index: usize, value: f64 },
    Io(std::io::Error),
    /// A file failed structural validation (bad magic, truncation, parse).
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                actual,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {actual}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Convergence { sweeps, off_norm } => write!(
                f,
                "eigensolver failed to converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})"
            ),
            Error::InsufficientSamples { needed, actual } => {
                write!(f, "insufficient samples: need {needed}, have {actual}")
            }
            Error::InvalidBatch(msg) => write!(f, "invalid batch: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NumericalFailure(msg) => write!(f, "numerical failure: {msg}"),
            Error::NonFiniteGradient { index, value } => {
                write!(f, "non-finite gradient at parameter {index}: {value}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
