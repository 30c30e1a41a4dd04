//! Numerical tolerances used across solvers and self-checks.
//!
//! Grouped here so that every threshold has one authoritative value.

/// Control-affinity residual allowed when validating a model.
pub const AFFINITY_TOL: f64 = 1e-12;

/// Relative error allowed between analytic first derivatives and central
/// finite differences (step [`FD_STEP`]).
pub const DERIVATIVE_REL_TOL: f64 = 1e-6;

/// Relative error allowed for Hessian actions against differenced gradients.
pub const HESSIAN_FD_TOL: f64 = 1e-5;

/// Central finite-difference step for derivative checks.
pub const FD_STEP: f64 = 1e-5;

/// Adjoint identities, conditional-expectation projections, plan marginals.
pub const EXACT_OP_TOL: f64 = 1e-12;

/// Default absolute tolerance for grouping coincident particles.
pub const GROUP_TOL: f64 = 1e-9;

/// Symmetry defect allowed in the assembled Hamiltonian Hessian.
pub const HESSIAN_SYMMETRY_TOL: f64 = 1e-8;

/// Residual cap for Riccati, Lyapunov and diagonalization identities.
pub const MATRIX_EQUATION_TOL: f64 = 1e-8;

/// `T * T_inv = I` defect cap for the decoupling transform.
pub const TRANSFORM_IDENTITY_TOL: f64 = 1e-10;

/// Unitary-conjugation identities between lifted and intrinsic operators.
pub const CONJUGATION_TOL: f64 = 1e-10;

/// Symmetric eigenvalues above `-PSD_CLAMP_TOL` are clamped to zero when
/// factoring a nominally positive-semidefinite matrix.
pub const PSD_CLAMP_TOL: f64 = 1e-9;

/// Condition-number cap beyond which a Jacobian is declared degenerate.
pub const COND_CAP: f64 = 1e12;

/// Classification threshold for Hautus tests (unstable eigenvalue cut and
/// singular-value pass margin).
pub const HAUTUS_TOL: f64 = 1e-9;

/// Safety margin taken off the spectral abscissa when reporting a decay rate.
pub const DECAY_MARGIN: f64 = 0.05;

/// Envelope constants above this value flag an envelope failure.
pub const ENVELOPE_C_MAX: f64 = 1e3;

/// Floor applied to deviation series before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;
