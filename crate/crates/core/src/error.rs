//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by solvers, assembly routines and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched particle counts or ambient dimensions.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A model evaluator returned a non-finite value.
    #[error("evaluator `{name}` produced a non-finite value at {detail}")]
    EvaluatorFailure { name: &'static str, detail: String },

    /// Newton Jacobian too ill-conditioned to trust.
    #[error("degenerate Jacobian: condition number {cond:.3e} exceeds cap {cap:.3e}")]
    DegenerateJacobian { cond: f64, cap: f64 },

    /// An iterative solver ran out of iterations.
    #[error("{solver} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        solver: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// State blow-up during time integration.
    #[error("time integration produced non-finite state at sweep {sweep}; reduce the relaxation factor or refine the grid")]
    Instability { sweep: usize },

    /// A structural hypothesis required by the certification chain failed.
    #[error("hypothesis check `{check}` failed: {detail}")]
    HypothesisFailure { check: &'static str, detail: String },

    /// Riccati solve could not extract a stable invariant subspace.
    #[error("no stable invariant subspace of dimension {expected} (found {found})")]
    RiccatiInfeasible { expected: usize, found: usize },

    /// Matrix-equation residual stayed above tolerance after refinement.
    #[error("{equation} residual {residual:.3e} above tolerance {tol:.3e} after refinement")]
    ResidualTooLarge {
        equation: &'static str,
        residual: f64,
        tol: f64,
    },

    /// Lyapunov/decay routines need a stable coefficient matrix.
    #[error("matrix is not stable: spectral abscissa {abscissa:.3e}")]
    UnstableMatrix { abscissa: f64 },

    /// Control values missing for a position group during transfer.
    #[error("no control value supplied for position group at index {group}")]
    MissingGroupControl { group: usize },

    /// A feasibility requirement was violated beyond tolerance.
    #[error("infeasible pair: {detail}")]
    Infeasible { detail: String },

    /// Group-averaged control broke the constraint: the model violates control affinity.
    #[error("averaged control violates the constraint by {defect:.3e} (> {tol:.3e}); the dynamics is not affine in the control")]
    AffinityViolation { defect: f64, tol: f64 },

    /// An operator expected to preserve the horizontal subspace does not.
    #[error("block `{block}` does not preserve the group subspace: defect {defect:.3e} (tol {tol:.3e})")]
    InvarianceViolation {
        block: &'static str,
        defect: f64,
        tol: f64,
    },

    /// Assembled operator failed a structural self-check.
    #[error("operator assembly self-check failed: {detail}")]
    Assembly { detail: String },

    /// Configuration file rejected.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 hypothesis, 4 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::HypothesisFailure { .. } => 3,
            Error::NonConvergence { .. }
            | Error::Instability { .. }
            | Error::DegenerateJacobian { .. }
            | Error::RiccatiInfeasible { .. }
            | Error::ResidualTooLarge { .. }
            | Error::UnstableMatrix { .. } => 4,
            _ => 1,
        }
    }
}
