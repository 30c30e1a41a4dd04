//! Mean-field control problems: dynamics, running cost and terminal cost
//! together with every derivative the solvers consume, plus hypothesis
//! validation against finite differences.

mod library;

pub use library::{LqMeanField, NonlinearAttraction, QuadraticControlFixture, ScalarLq, ZeroModel};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::MeasureFunctional;
use crate::measure::EmpiricalMeasure;
use crate::tolerances::{AFFINITY_TOL, DERIVATIVE_REL_TOL, FD_STEP};

/// A mean-field control problem `(v, L, phi)` over empirical measures.
///
/// Evaluators are pure and re-entrant; measures are always finite particle
/// ensembles. Conventions for the measure-derivative kernels:
///
/// * `dv_mu(mu, x, u, y)` is the `d x d` matrix kernel of the measure
///   derivative of `v` (rows: components of `v`; columns: displacement
///   direction of the probe mass at `y`). Moving one particle of an
///   `N`-atom ensemble changes `v` at rate `(1/N) dv_mu(..)(x_j)`.
/// * Second-order measure kernels follow the same convention and default
///   to zero. Interaction kernels are assumed independent of the control;
///   every built-in family satisfies this.
pub trait ControlProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn velocity(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, mu: &EmpiricalMeasure) -> f64;

    fn dv_x(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn dv_u(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn dv_mu(
        &self,
        mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DMatrix<f64>;

    fn dl_x(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn dl_u(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn dl_mu(
        &self,
        mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64>;

    fn d2l_xx(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// `[r][c] = d^2 L / dx_r du_c`.
    fn d2l_xu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.control_dim())
    }
    fn d2l_uu(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// `[r][c] = d^2 <psi, v> / dx_r dx_c`.
    fn d2v_xx_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// `[r][c] = d^2 <psi, v> / dx_r du_c`.
    fn d2v_xu_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.control_dim())
    }

    /// `[r][c] = d^2 <psi, v> / du_r du_c`; zero for control-affine
    /// dynamics, kept so the affinity check can be falsified.
    fn d2v_uu_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim(), self.control_dim())
    }

    /// Measure derivative of `dv_x^T psi` at probe `y` (`d x d`; rows
    /// follow the base gradient, columns the probe direction).
    fn dmu_dxv_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Measure derivative of `dl_x` at probe `y` (`d x d`).
    fn dmu_dlx(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Probe-point derivative of `dv_mu(..)(y)^T psi` (`d x d`).
    fn dy_dmu_v_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Probe-point derivative of `dl_mu(..)(y)` (`d x d`).
    fn dy_dmu_l(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Second measure derivative of `<psi, v>` at the probe pair `(y, z)`.
    fn d2mu_v_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
        _psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Second measure derivative of `L` at the probe pair `(y, z)`.
    fn d2mu_l(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Gradient kernel of the terminal cost.
    fn dphi_mu(&self, _mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    /// Base-point derivative of the terminal gradient kernel.
    fn dphi_mu_x(&self, _mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    /// Nonlocal Hessian kernel of the terminal cost.
    fn dphi_mu2(
        &self,
        _mu: &EmpiricalMeasure,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }
}

/// The terminal cost viewed as a law-invariant functional, so the lift
/// calculus applies to it unchanged.
pub struct TerminalCost<'a> {
    pub model: &'a dyn ControlProblem,
}

impl MeasureFunctional for TerminalCost<'_> {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        self.model.terminal_cost(mu)
    }
    fn grad_kernel(&self, mu: &EmpiricalMeasure, y: &DVector<f64>) -> DVector<f64> {
        self.model.dphi_mu(mu, y)
    }
    fn local_hessian(&self, mu: &EmpiricalMeasure, y: &DVector<f64>) -> DMatrix<f64> {
        self.model.dphi_mu_x(mu, y)
    }
    fn nonlocal_hessian(
        &self,
        mu: &EmpiricalMeasure,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.model.dphi_mu2(mu, y, z)
    }
}

/// Outcome of [`validate_hypotheses`].
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    /// Worst control-affinity residual over the samples.
    pub affinity_residual: f64,
    /// Smallest eigenvalue of `d2l_uu` over the samples.
    pub min_uu_eigenvalue: f64,
    /// Worst relative error between analytic derivatives and central
    /// finite differences.
    pub max_derivative_rel_error: f64,
    /// Worst relative error per evaluator.
    pub per_evaluator: Vec<(String, f64)>,
    pub affinity_ok: bool,
    pub convexity_ok: bool,
    pub derivatives_ok: bool,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.affinity_ok && self.convexity_ok && self.derivatives_ok
    }
}

fn require_finite(name: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::EvaluatorFailure {
            name,
            detail: "non-finite output on a sampled input".into(),
        });
    }
    Ok(())
}

fn rel_err_mat(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(fd.amax()).max(1.0);
    if scale == 0.0 {
        0.0
    } else {
        (analytic - fd).amax() / scale
    }
}

fn rel_err_vec(analytic: &DVector<f64>, fd: &DVector<f64>) -> f64 {
    let scale = analytic.amax().max(fd.amax()).max(1.0);
    (analytic - fd).amax() / scale
}

fn shift_particle(mu: &EmpiricalMeasure, j: usize, c: usize, h: f64) -> EmpiricalMeasure {
    let mut pts = mu.points().clone();
    pts[(j, c)] += h;
    EmpiricalMeasure::new(pts).expect("finite shift")
}

fn shift(v: &DVector<f64>, c: usize, h: f64) -> DVector<f64> {
    let mut out = v.clone();
    out[c] += h;
    out
}

/// Central difference of a vector-valued map along coordinate `c`.
fn central<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    at: &DVector<f64>,
    c: usize,
    h: f64,
) -> DVector<f64> {
    (f(&shift(at, c, h)) - f(&shift(at, c, -h))) / (2.0 * h)
}

/// Central difference of a vector-valued map when particle `j` of the
/// measure moves along coordinate `c`; returns `N` times the raw rate so
/// it compares directly against the kernel value.
fn central_mu<F: Fn(&EmpiricalMeasure) -> DVector<f64>>(
    f: F,
    mu: &EmpiricalMeasure,
    j: usize,
    c: usize,
    h: f64,
) -> DVector<f64> {
    let n = mu.len() as f64;
    (f(&shift_particle(mu, j, c, h)) - f(&shift_particle(mu, j, c, -h))) * (n / (2.0 * h))
}

/// Samples the standing hypotheses on a model: control affinity of the
/// dynamics, strict convexity of the running cost in the control, and
/// agreement of every analytic derivative evaluator with central finite
/// differences (step [`FD_STEP`], relative tolerance
/// [`DERIVATIVE_REL_TOL`]).
pub fn validate_hypotheses(
    model: &dyn ControlProblem,
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    assert!(samples >= 1, "samples must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.state_dim();
    let m = model.control_dim();
    let h = FD_STEP;

    let mut affinity_residual = 0.0_f64;
    let mut min_uu = f64::INFINITY;
    let mut worst: Vec<(String, f64)> = Vec::new();

    fn record(worst: &mut Vec<(String, f64)>, name: &str, err: f64) {
        match worst.iter_mut().find(|(n, _)| n == name) {
            Some((_, w)) => *w = w.max(err),
            None => worst.push((name.to_string(), err)),
        }
    }

    for _ in 0..samples {
        let n = rng.random_range(3..=6);
        let mu = EmpiricalMeasure::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5)))
            .expect("finite sample");
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        let u = DVector::from_fn(m, |_, _| rng.random_range(-1.5..1.5));
        let w = DVector::from_fn(m, |_, _| rng.random_range(-1.5..1.5));
        let psi = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        let y = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        let alpha: f64 = rng.random_range(0.0..1.0);

        // Hypothesis: affinity of the dynamics in the control.
        let mixed = &u * (1.0 - alpha) + &w * alpha;
        let v_mixed = model.velocity(&mu, &x, &mixed);
        require_finite("velocity", v_mixed.as_slice())?;
        let v_combo =
            model.velocity(&mu, &x, &u) * (1.0 - alpha) + model.velocity(&mu, &x, &w) * alpha;
        affinity_residual = affinity_residual.max((v_mixed - v_combo).amax());

        // Hypothesis: strict convexity of L in the control.
        let uu = model.d2l_uu(&mu, &x, &u);
        require_finite("d2l_uu", uu.as_slice())?;
        let eig = crate::linalg::symmetrize(&uu).symmetric_eigen();
        min_uu = min_uu.min(eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b)));

        // dv_x, dv_u.
        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(c, &central(|p| model.velocity(&mu, p, &u), &x, c, h));
        }
        record(&mut worst, "dv_x", rel_err_mat(&model.dv_x(&mu, &x, &u), &fd));

        let mut fd = DMatrix::zeros(d, m);
        for c in 0..m {
            fd.set_column(c, &central(|p| model.velocity(&mu, &x, p), &u, c, h));
        }
        record(&mut worst, "dv_u", rel_err_mat(&model.dv_u(&mu, &x, &u), &fd));

        // dl_x, dl_u.
        let fd = DVector::from_fn(d, |c, _| {
            central(
                |p| DVector::from_element(1, model.running_cost(&mu, p, &u)),
                &x,
                c,
                h,
            )[0]
        });
        record(&mut worst, "dl_x", rel_err_vec(&model.dl_x(&mu, &x, &u), &fd));
        let fd = DVector::from_fn(m, |c, _| {
            central(
                |p| DVector::from_element(1, model.running_cost(&mu, &x, p)),
                &u,
                c,
                h,
            )[0]
        });
        record(&mut worst, "dl_u", rel_err_vec(&model.dl_u(&mu, &x, &u), &fd));

        // Measure kernels of v and L, probed at a few particles.
        for j in 0..n.min(3) {
            let zj = mu.point(j);
            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(c, &central_mu(|q| model.velocity(q, &x, &u), &mu, j, c, h));
            }
            record(
                &mut worst,
                "dv_mu",
                rel_err_mat(&model.dv_mu(&mu, &x, &u, &zj), &fd),
            );

            let mut fd = DVector::zeros(d);
            for c in 0..d {
                fd[c] = central_mu(
                    |q| DVector::from_element(1, model.running_cost(q, &x, &u)),
                    &mu,
                    j,
                    c,
                    h,
                )[0];
            }
            record(
                &mut worst,
                "dl_mu",
                rel_err_vec(&model.dl_mu(&mu, &x, &u, &zj), &fd),
            );

            // Terminal-cost gradient kernel through the lift relation.
            let mut fd = DVector::zeros(d);
            for c in 0..d {
                fd[c] = central_mu(
                    |q| DVector::from_element(1, model.terminal_cost(q)),
                    &mu,
                    j,
                    c,
                    h,
                )[0];
            }
            record(
                &mut worst,
                "dphi_mu",
                rel_err_vec(&model.dphi_mu(&mu, &zj), &fd),
            );

            // Mixed second-order measure kernels.
            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(
                    c,
                    &central_mu(|q| model.dv_x(q, &x, &u).transpose() * &psi, &mu, j, c, h),
                );
            }
            record(
                &mut worst,
                "dmu_dxv_psi",
                rel_err_mat(&model.dmu_dxv_psi(&mu, &x, &u, &zj, &psi), &fd),
            );

            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(c, &central_mu(|q| model.dl_x(q, &x, &u), &mu, j, c, h));
            }
            record(
                &mut worst,
                "dmu_dlx",
                rel_err_mat(&model.dmu_dlx(&mu, &x, &u, &zj), &fd),
            );

            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(
                    c,
                    &central_mu(|q| model.dv_mu(q, &x, &u, &y).transpose() * &psi, &mu, j, c, h),
                );
            }
            record(
                &mut worst,
                "d2mu_v_psi",
                rel_err_mat(&model.d2mu_v_psi(&mu, &x, &u, &y, &zj, &psi), &fd),
            );

            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(c, &central_mu(|q| model.dl_mu(q, &x, &u, &y), &mu, j, c, h));
            }
            record(
                &mut worst,
                "d2mu_l",
                rel_err_mat(&model.d2mu_l(&mu, &x, &u, &y, &zj), &fd),
            );

            let mut fd = DMatrix::zeros(d, d);
            for c in 0..d {
                fd.set_column(c, &central_mu(|q| model.dphi_mu(q, &y), &mu, j, c, h));
            }
            record(
                &mut worst,
                "dphi_mu2",
                rel_err_mat(&model.dphi_mu2(&mu, &y, &zj), &fd),
            );
        }

        // Pointwise second derivatives.
        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(c, &central(|p| model.dl_x(&mu, p, &u), &x, c, h));
        }
        record(
            &mut worst,
            "d2l_xx",
            rel_err_mat(&model.d2l_xx(&mu, &x, &u), &fd),
        );

        let mut fd = DMatrix::zeros(d, m);
        for c in 0..m {
            fd.set_column(c, &central(|p| model.dl_x(&mu, &x, p), &u, c, h));
        }
        record(
            &mut worst,
            "d2l_xu",
            rel_err_mat(&model.d2l_xu(&mu, &x, &u), &fd),
        );

        let mut fd = DMatrix::zeros(m, m);
        for c in 0..m {
            fd.set_column(c, &central(|p| model.dl_u(&mu, &x, p), &u, c, h));
        }
        record(
            &mut worst,
            "d2l_uu",
            rel_err_mat(&model.d2l_uu(&mu, &x, &u), &fd),
        );

        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(
                c,
                &central(|p| model.dv_x(&mu, p, &u).transpose() * &psi, &x, c, h),
            );
        }
        record(
            &mut worst,
            "d2v_xx_psi",
            rel_err_mat(&model.d2v_xx_psi(&mu, &x, &u, &psi), &fd),
        );

        let mut fd = DMatrix::zeros(d, m);
        for c in 0..m {
            fd.set_column(
                c,
                &central(|p| model.dv_x(&mu, &x, p).transpose() * &psi, &u, c, h),
            );
        }
        record(
            &mut worst,
            "d2v_xu_psi",
            rel_err_mat(&model.d2v_xu_psi(&mu, &x, &u, &psi), &fd),
        );

        let mut fd = DMatrix::zeros(m, m);
        for c in 0..m {
            fd.set_column(
                c,
                &central(|p| model.dv_u(&mu, &x, p).transpose() * &psi, &u, c, h),
            );
        }
        record(
            &mut worst,
            "d2v_uu_psi",
            rel_err_mat(&model.d2v_uu_psi(&mu, &x, &u, &psi), &fd),
        );

        // Probe-point derivatives of the first-order kernels.
        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(
                c,
                &central(|p| model.dv_mu(&mu, &x, &u, p).transpose() * &psi, &y, c, h),
            );
        }
        record(
            &mut worst,
            "dy_dmu_v_psi",
            rel_err_mat(&model.dy_dmu_v_psi(&mu, &x, &u, &y, &psi), &fd),
        );

        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(c, &central(|p| model.dl_mu(&mu, &x, &u, p), &y, c, h));
        }
        record(
            &mut worst,
            "dy_dmu_l",
            rel_err_mat(&model.dy_dmu_l(&mu, &x, &u, &y), &fd),
        );

        let mut fd = DMatrix::zeros(d, d);
        for c in 0..d {
            fd.set_column(c, &central(|p| model.dphi_mu(&mu, p), &y, c, h));
        }
        record(
            &mut worst,
            "dphi_mu_x",
            rel_err_mat(&model.dphi_mu_x(&mu, &y), &fd),
        );
    }

    let report = HypothesisReport {
        affinity_residual,
        min_uu_eigenvalue: min_uu,
        max_derivative_rel_error: worst.iter().fold(0.0, |a, (_, e)| a.max(*e)),
        affinity_ok: affinity_residual <= AFFINITY_TOL,
        convexity_ok: min_uu > 0.0,
        derivatives_ok: worst.iter().all(|(_, e)| *e <= DERIVATIVE_REL_TOL),
        per_evaluator: worst,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_lq_satisfies_hypotheses() {
        let model = ScalarLq { a: 1.0, b: 1.0 };
        let report = validate_hypotheses(&model, 100, 7).unwrap();
        assert!(report.passed(), "{report:?}");
        // Affine dynamics: residual vanishes up to float re-association.
        assert!(report.affinity_residual <= 1e-15);
        // L = x^2 + u^2 has constant control curvature 2.
        assert!((report.min_uu_eigenvalue - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lq_mean_field_with_identity_r() {
        let model = LqMeanField::isotropic(2, 2, -0.5, 0.3, 1.0, 1.0, 0.5, 1.0);
        let report = validate_hypotheses(&model, 60, 11).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!((report.min_uu_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lq_mean_field_kernel_is_constant_interaction_matrix() {
        // dv_mu is constant in (x, u, y) and equals the interaction matrix.
        let model = LqMeanField::isotropic(2, 1, -1.0, 0.4, 1.0, 0.5, 1.0, 1.0);
        let mu = EmpiricalMeasure::new(DMatrix::from_row_slice(
            3,
            2,
            &[0.0, 1.0, -1.0, 0.5, 2.0, 2.0],
        ))
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let u = DVector::from_vec(vec![0.2]);
        for j in 0..3 {
            let k = model.dv_mu(&mu, &x, &u, &mu.point(j));
            assert!((&k - model.interaction_matrix()).norm() < 1e-14);
        }
    }

    #[test]
    fn nonlinear_attraction_passes_derivative_checks() {
        let model = NonlinearAttraction::new(2, 2, 1.0, 0.8, 1.3, 1.0, 1.0);
        let report = validate_hypotheses(&model, 40, 3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn quadratic_control_fixture_fails_affinity() {
        let model = QuadraticControlFixture;
        let report = validate_hypotheses(&model, 50, 9).unwrap();
        assert!(!report.affinity_ok);
        assert!(report.affinity_residual > 1e-3);
        // Its derivatives are still consistent; only affinity breaks.
        assert!(report.derivatives_ok, "{report:?}");
    }

    #[test]
    fn terminal_cost_adapter_matches_model_kernels() {
        let model = LqMeanField::isotropic(1, 1, -1.0, 0.4, 1.0, 0.5, 1.0, 1.0)
            .with_terminal_quadratic(0.7, 0.3);
        let phi = TerminalCost { model: &model };
        let mu = EmpiricalMeasure::new(DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        let y = DVector::from_element(1, 0.5);
        assert_eq!(phi.value(&mu), model.terminal_cost(&mu));
        assert_eq!(phi.grad_kernel(&mu, &y), model.dphi_mu(&mu, &y));
    }
}
