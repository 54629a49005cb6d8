//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric: max asymmetry {max_asymmetry:.3e} exceeds {tol:.3e}")]
    NotSymmetric { max_asymmetry: f64, tol: f64 },

    #[error("Cholesky factorization failed at pivot {pivot}: matrix is not positive definite")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error(
        "inner solver did not converge: gradient norm {achieved:.3e} > {tol:.3e} after {iters} iterations"
    )]
    InnerNoConvergence { achieved: f64, tol: f64, iters: usize },

    #[error(
        "outer solver did not converge: total gradient norm {achieved:.3e} > {tol:.3e} after {iters} iterations"
    )]
    OuterNoConvergence {
        achieved: f64,
        tol: f64,
        iters: usize,
        /// Last iterate, for inspection despite non-convergence.
        state: Box<crate::bilevel::MetaState>,
    },

    #[error(
        "meta state is not converged (total gradient norm {outer_grad_norm:.3e}); influence estimates require stationarity"
    )]
    UnconvergedState { outer_grad_norm: f64 },

    #[error(
        "spectral radius estimate {rho:.4} >= 1: series will diverge; reduce the scale or increase damping"
    )]
    SpectralPrecheck { rho: f64 },

    #[error("{what} size {found} exceeds guard {guard}")]
    GuardExceeded { what: &'static str, found: usize, guard: usize },

    #[error("linear solve residual {residual:.3e} exceeds {tol:.3e}")]
    SolveResidual { residual: f64, tol: f64 },

    #[error("operator failed {check} check: deviation {deviation:.3e} exceeds {tol:.3e}")]
    OperatorCheck { check: &'static str, deviation: f64, tol: f64 },

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("example index {index} out of bounds for {split} split of task {task_id} (len {len})")]
    BadExampleIndex { task_id: usize, split: &'static str, index: usize, len: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("curvature fit requires cross-entropy loss, got {0:?}")]
    FisherRequiresCrossEntropy(crate::model::Loss),

    #[error("infeasible episode spec: {0}")]
    InfeasibleSpec(String),

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("malformed container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Returns the last solver iterate when the outer solver failed to converge.
    pub fn unconverged_state(&self) -> Option<&crate::bilevel::MetaState> {
        match self {
            Error::OuterNoConvergence { state, .. } => Some(state),
            _ => None,
        }
    }
}
