use std::io;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {section}")]
    Truncated { section: String },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("invalid bundle: {}", .0.join("; "))]
    InvalidBundle(Vec<String>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("need at least {needed} {what}, got {got}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate embedding at row {row} (norm below 1e-12)")]
    DegenerateEmbedding { row: usize },

    #[error("matrix is not positive definite (Cholesky pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("jvp/vjp oracles are inconsistent at step {step}: <Jv,u>={lhs:e}, <v,J^T u>={rhs:e}")]
    InconsistentOracle { step: usize, lhs: f64, rhs: f64 },

    #[error("power iteration did not converge at step {step} after {iters} iterations (last estimate {last:e})")]
    NoConvergence { step: usize, iters: usize, last: f64 },

    #[error("degenerate calibration: component `{0}` has zero spread")]
    DegenerateCalibration(String),

    #[error("metric undefined: {n_pos} positives, {n_neg} negatives")]
    UndefinedMetric { n_pos: usize, n_neg: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("perturbation collapses the column rank (smallest singular value {0:e})")]
    DegeneratePerturbation(f64),

    #[error("sequence of length {len} exceeds the context window {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("training diverged: non-finite loss at step {0}")]
    Divergence(usize),

    #[error("index {index} out of range (valid: {lo}..{hi})")]
    OutOfRange { index: usize, lo: usize, hi: usize },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field: field.into(),
        reason: reason.into(),
    }
}
