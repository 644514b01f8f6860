use thiserror::Error;

/// Errors raised while building models, value functions, rules and reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("not a probability vector: {0}")]
    NotAPmf(String),
    #[error("hypotheses are indistinguishable: f0 and f1 coincide on every symbol")]
    IndistinguishableHypotheses,
    #[error("likelihood-ratio atom count {count} exceeds cap {cap}; raise merge_tol")]
    AtomExplosion { count: usize, cap: usize },
    #[error("group size {size} has non-positive cost {cost}")]
    ZeroCost { size: usize, cost: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid horizon {0}: must be at least 1")]
    InvalidHorizon(usize),
    #[error("value grid too narrow: {0}")]
    GridTooNarrow(String),
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("design is trivial: stopping after the first group is optimal")]
    TrivialDesign,
    #[error("root finding failed: {0}")]
    NoRoot(String),
    #[error("continuation set is not an interval at stage {stage}")]
    NonIntervalContinuation { stage: usize },
    #[error("bad thresholds: need 0 < A < B, got A={lower}, B={upper}")]
    BadThresholds { lower: f64, upper: f64 },
    #[error("state space too large for exhaustive enumeration: {0}")]
    StateSpaceTooLarge(String),
    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
