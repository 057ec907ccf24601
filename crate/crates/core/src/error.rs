use thiserror::Error;

/// Errors raised by kernel construction and the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not irreducible")]
    NotIrreducible,

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("uniformization constant {nu} is below the exit rate {exit_rate} of phase {phase}")]
    NuTooSmall { nu: f64, exit_rate: f64, phase: usize },

    #[error("offset {offset:?} is outside the jump range -{k}..={k}")]
    OffsetOutOfRange { offset: Vec<i32>, k: usize },

    #[error("ray center is not interior to the region (chi = {chi})")]
    CenterNotInterior { chi: f64 },

    #[error("bracket expansion failed along direction {direction:?}")]
    BracketFailure { direction: Vec<f64> },

    #[error("minimal solution may diverge: gamma_dagger = {gamma_dagger} > 1")]
    MayDiverge { gamma_dagger: f64 },

    #[error("I - H is singular: spr(H) = {spr}")]
    Singular { spr: f64 },

    #[error("finiteness of N is indeterminate: spr(H) = {spr} is within tolerance of 1")]
    Indeterminate { spr: f64 },

    #[error("direction vector is zero")]
    ZeroDirection,

    #[error("the region is empty: gamma_dagger = {gamma_dagger} >= 1")]
    EmptyGamma { gamma_dagger: f64 },

    #[error("direction {0:?} is not a vector of mutually prime positive integers")]
    NotCoprime(Vec<i64>),

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("occupation measure is not known to be finite (drift {drift:?})")]
    NotFinite { drift: Vec<f64> },

    #[error("start state is outside the box")]
    StartOutsideBox,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("zero occupation mass at k = {k}")]
    ZeroMass { k: usize },

    #[error("occupation table did not converge")]
    NotConverged,

    #[error("bad probabilities: {0}")]
    BadProbabilities(String),
}

pub type Result<T> = std::result::Result<T, Error>;
