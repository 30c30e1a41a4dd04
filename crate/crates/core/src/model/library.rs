//! Built-in model families.

use nalgebra::{DMatrix, DVector};

use super::ControlProblem;
use crate::measure::EmpiricalMeasure;

/// One-dimensional benchmark: `v = a x + b u`, `L = x^2 + u^2`, no
/// terminal cost. For `a, b > 0` the static problem has its solution at
/// the origin.
#[derive(Debug, Clone)]
pub struct ScalarLq {
    pub a: f64,
    pub b: f64,
}

impl ControlProblem for ScalarLq {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn velocity(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.a * x[0] + self.b * u[0])
    }
    fn running_cost(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x[0] * x[0] + u[0] * u[0]
    }
    fn terminal_cost(&self, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn dv_x(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.a)
    }
    fn dv_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.b)
    }
    fn dv_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn dl_x(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * x[0])
    }
    fn dl_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * u[0])
    }
    fn dl_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn d2l_xx(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
    fn d2l_uu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
}

/// Linear-quadratic mean-field family:
/// `v = A x + A_bar m(mu) + B u`,
/// `L = (x' Q x + (x - m)' Q_bar (x - m) + u' R u) / 2`,
/// `phi = tau/2 |m|^2 + rho/2 * int |x - m|^2 dmu`,
/// where `m(mu)` is the first moment.
#[derive(Debug, Clone)]
pub struct LqMeanField {
    d: usize,
    m: usize,
    a: DMatrix<f64>,
    a_bar: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    q_bar: DMatrix<f64>,
    r: DMatrix<f64>,
    tau_phi: f64,
    rho_phi: f64,
}

impl LqMeanField {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        a_bar: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        q_bar: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Self {
        let d = a.nrows();
        let m = b.ncols();
        assert_eq!(a.shape(), (d, d));
        assert_eq!(a_bar.shape(), (d, d));
        assert_eq!(b.shape(), (d, m));
        assert_eq!(q.shape(), (d, d));
        assert_eq!(q_bar.shape(), (d, d));
        assert_eq!(r.shape(), (m, m));
        for (name, mat) in [("q", &q), ("q_bar", &q_bar), ("r", &r)] {
            assert!(
                (mat - mat.transpose()).amax() <= 1e-12,
                "{name} must be symmetric"
            );
        }
        Self {
            d,
            m,
            a,
            a_bar,
            b,
            q,
            q_bar,
            r,
            tau_phi: 0.0,
            rho_phi: 0.0,
        }
    }

    /// Scalar-multiple-of-identity instance in the given dimensions.
    pub fn isotropic(
        d: usize,
        m: usize,
        a: f64,
        a_bar: f64,
        b: f64,
        q: f64,
        q_bar: f64,
        r: f64,
    ) -> Self {
        Self::new(
            DMatrix::identity(d, d) * a,
            DMatrix::identity(d, d) * a_bar,
            DMatrix::identity(d, m) * b,
            DMatrix::identity(d, d) * q,
            DMatrix::identity(d, d) * q_bar,
            DMatrix::identity(m, m) * r,
        )
    }

    /// Adds the moment-quadratic terminal cost with weights `(tau, rho)`.
    pub fn with_terminal_quadratic(mut self, tau: f64, rho: f64) -> Self {
        self.tau_phi = tau;
        self.rho_phi = rho;
        self
    }

    pub fn interaction_matrix(&self) -> &DMatrix<f64> {
        &self.a_bar
    }
}

impl ControlProblem for LqMeanField {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn velocity(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.a_bar * mu.mean() + &self.b * u
    }
    fn running_cost(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let centered = x - mu.mean();
        0.5 * ((&self.q * x).dot(x) + (&self.q_bar * &centered).dot(&centered) + (&self.r * u).dot(u))
    }
    fn terminal_cost(&self, mu: &EmpiricalMeasure) -> f64 {
        let m = mu.mean();
        let mut spread = 0.0;
        for i in 0..mu.len() {
            spread += (mu.point(i) - m).norm_squared();
        }
        spread /= mu.len() as f64;
        0.5 * self.tau_phi * m.norm_squared() + 0.5 * self.rho_phi * spread
    }
    fn dv_x(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn dv_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn dv_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.a_bar.clone()
    }
    fn dl_x(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.q_bar * (x - mu.mean())
    }
    fn dl_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.r * u
    }
    fn dl_mu(
        &self,
        mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DVector<f64> {
        -(&self.q_bar * (x - mu.mean()))
    }
    fn d2l_xx(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        &self.q + &self.q_bar
    }
    fn d2l_uu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.r.clone()
    }
    fn dmu_dlx(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        -self.q_bar.clone()
    }
    fn d2mu_l(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.q_bar.clone()
    }
    fn dphi_mu(&self, mu: &EmpiricalMeasure, y: &DVector<f64>) -> DVector<f64> {
        let m = mu.mean();
        m * self.tau_phi + (y - m) * self.rho_phi
    }
    fn dphi_mu_x(&self, _mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * self.rho_phi
    }
    fn dphi_mu2(
        &self,
        _mu: &EmpiricalMeasure,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * (self.tau_phi - self.rho_phi)
    }
}

/// Interaction through a smooth confining potential:
/// `v = -(grad W * mu)(x) + B u` with
/// `W(z) = kappa |z|^2 / 2 - eta s^2 exp(-|z|^2 / (2 s^2))`,
/// and a quadratic non-interacting running cost.
#[derive(Debug, Clone)]
pub struct NonlinearAttraction {
    d: usize,
    m: usize,
    b: DMatrix<f64>,
    kappa: f64,
    eta: f64,
    width: f64,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl NonlinearAttraction {
    pub fn new(d: usize, m: usize, kappa: f64, eta: f64, width: f64, q: f64, r: f64) -> Self {
        assert!(width > 0.0);
        Self {
            d,
            m,
            b: DMatrix::identity(d, m),
            kappa,
            eta,
            width,
            q: DMatrix::identity(d, d) * q,
            r: DMatrix::identity(m, m) * r,
        }
    }

    fn bump(&self, z: &DVector<f64>) -> f64 {
        (-z.norm_squared() / (2.0 * self.width * self.width)).exp()
    }

    fn grad_w(&self, z: &DVector<f64>) -> DVector<f64> {
        z * (self.kappa + self.eta * self.bump(z))
    }

    fn hess_w(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let e = self.bump(z);
        let s2 = self.width * self.width;
        let eye = DMatrix::identity(self.d, self.d);
        &eye * self.kappa + (&eye - z * z.transpose() / s2) * (self.eta * e)
    }

    /// `sum_s psi_s d^3 W / dz_r dz_c dz_s`, symmetric in `(r, c)`.
    fn third_w_psi(&self, z: &DVector<f64>, psi: &DVector<f64>) -> DMatrix<f64> {
        let e = self.bump(z);
        let s2 = self.width * self.width;
        let zp = z.dot(psi);
        let eye = DMatrix::identity(self.d, self.d);
        let outer = z * z.transpose() * (zp / (s2 * s2))
            - (&eye * zp + psi * z.transpose() + z * psi.transpose()) / s2;
        outer * (self.eta * e)
    }
}

impl ControlProblem for NonlinearAttraction {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn velocity(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut drift = DVector::zeros(self.d);
        for j in 0..mu.len() {
            drift -= self.grad_w(&(x - mu.point(j)));
        }
        drift / mu.len() as f64 + &self.b * u
    }
    fn running_cost(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * ((&self.q * x).dot(x) + (&self.r * u).dot(u))
    }
    fn terminal_cost(&self, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn dv_x(&self, mu: &EmpiricalMeasure, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.d);
        for j in 0..mu.len() {
            out -= self.hess_w(&(x - mu.point(j)));
        }
        out / mu.len() as f64
    }
    fn dv_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn dv_mu(
        &self,
        _mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.hess_w(&(x - y))
    }
    fn dl_x(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }
    fn dl_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.r * u
    }
    fn dl_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(self.d)
    }
    fn d2l_xx(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
    fn d2l_uu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.r.clone()
    }
    fn d2v_xx_psi(
        &self,
        mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.d);
        for j in 0..mu.len() {
            out -= self.third_w_psi(&(x - mu.point(j)), psi);
        }
        out / mu.len() as f64
    }
    fn dmu_dxv_psi(
        &self,
        _mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        y: &DVector<f64>,
        psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.third_w_psi(&(x - y), psi)
    }
    fn dy_dmu_v_psi(
        &self,
        _mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        y: &DVector<f64>,
        psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        -self.third_w_psi(&(x - y), psi)
    }
}

/// Negative fixture with `v = x u^2`: quadratic in the control, so the
/// affinity hypothesis fails while every derivative stays consistent.
#[derive(Debug, Clone)]
pub struct QuadraticControlFixture;

impl ControlProblem for QuadraticControlFixture {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn velocity(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] * u[0] * u[0])
    }
    fn running_cost(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x[0] * x[0] + u[0] * u[0]
    }
    fn terminal_cost(&self, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn dv_x(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, u[0] * u[0])
    }
    fn dv_u(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0 * x[0] * u[0])
    }
    fn dv_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn dl_x(&self, _mu: &EmpiricalMeasure, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * x[0])
    }
    fn dl_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * u[0])
    }
    fn dl_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn d2l_xx(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
    fn d2l_uu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
    fn d2v_xu_psi(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0 * u[0] * psi[0])
    }
    fn d2v_uu_psi(
        &self,
        _mu: &EmpiricalMeasure,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        psi: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0 * x[0] * psi[0])
    }
}

/// Identically zero dynamics and costs; every configuration is feasible
/// and every optimality residual vanishes.
#[derive(Debug, Clone)]
pub struct ZeroModel {
    pub d: usize,
    pub m: usize,
}

impl ControlProblem for ZeroModel {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn velocity(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.d)
    }
    fn running_cost(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn dv_x(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.d, self.d)
    }
    fn dv_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.d, self.m)
    }
    fn dv_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.d, self.d)
    }
    fn dl_x(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.d)
    }
    fn dl_u(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.m)
    }
    fn dl_mu(
        &self,
        _mu: &EmpiricalMeasure,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(self.d)
    }
    fn d2l_xx(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.d, self.d)
    }
    fn d2l_uu(&self, _mu: &EmpiricalMeasure, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.m, self.m)
    }
}
