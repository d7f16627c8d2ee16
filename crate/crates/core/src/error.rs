use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Why a root search stopped without an acceptable root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonConvergence {
    MaxIterations,
    /// Step halving exhausted without reducing the score.
    Stalled,
    /// The information matrix vanishes: every covariate value in every comparison set is equal.
    NoInformation,
    /// The information matrix is singular but not identically zero.
    SingularInformation,
}

impl std::fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NonConvergence::MaxIterations => "iteration limit reached",
            NonConvergence::Stalled => "step halving exhausted",
            NonConvergence::NoInformation => "no information",
            NonConvergence::SingularInformation => "singular information",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside [0, {tau}]")]
    Domain { t: f64, tau: f64 },

    #[error("tied failure times at t = {t}")]
    TiedFailureTimes { t: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid nested case-control dataset: {0}")]
    Validation(ValidationReport),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("kernel window around t = {t} contains no sampled controls")]
    EmptyWindow { t: f64 },

    #[error("{reason} after {iterations} iterations (last iterate {last:?}, |score| = {score_norm:e})")]
    NonConvergence {
        reason: NonConvergence,
        last: Vec<f64>,
        iterations: usize,
        score_norm: f64,
    },

    #[error("matrix is not positive definite: {0}")]
    Conditioning(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
