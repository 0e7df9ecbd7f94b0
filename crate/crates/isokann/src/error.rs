//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown potential `{0}` (catalog: harmonic, doublewell1d, doublewell2d, triplewell2d, constant)")]
    UnknownPotential(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in `{what}` at component {component}")]
    NonFinite { what: &'static str, component: usize },

    #[error("trajectory diverged at step {step} (point {point}, replica {replica})")]
    Divergence { step: usize, point: u64, replica: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate values: spread {spread:.3e} below 1e-12 (function collapsed to a constant)")]
    Degenerate { spread: f64 },

    #[error("rank-deficient fit: regressor values are constant")]
    RankDeficient,

    #[error("affine scale a={a} outside (0, 1): iteration not converged or system not metastable")]
    OutOfRegime { a: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("linear solve failed (singular propagator matrix)")]
    LinearSolve,

    #[error("no convergence after {iters} iterations (last change {last_change:.3e})")]
    NoConvergence { iters: usize, last_change: f64 },

    #[error("chi collapsed to a constant at outer iteration {iter}")]
    ChiCollapsed { iter: usize },

    #[error("too many divergent points at outer iteration {iter}: {survivors}/{total} survived")]
    TooManyDivergent { iter: usize, survivors: usize, total: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
