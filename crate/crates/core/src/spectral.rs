//! Second-order analysis at a stationary triple: the 3x3 block Hessian of
//! the lifted Hamiltonian, Schur reduction and factorizations, Hautus
//! stabilizability/detectability tests, the Riccati/Lyapunov/transform
//! chain, decay constants and the horizontal/vertical hypothesis split.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::{GroupStructure, LiftedOperator, RandomVector};
use crate::linalg::{
    condition_number, eigenvalues, invert, psd_factor, sigma_min_complex, spectral_abscissa,
    spectral_norm, symmetrize, to_complex,
};
use crate::matrix_eq::{lyapunov_residual, riccati_residual, solve_lyapunov, solve_riccati};
use crate::model::ControlProblem;
use crate::tolerances::{
    COND_CAP, DECAY_MARGIN, GROUP_TOL, HAUTUS_TOL, HESSIAN_SYMMETRY_TOL, MATRIX_EQUATION_TOL,
    PSD_CLAMP_TOL, TRANSFORM_IDENTITY_TOL,
};

/// One block of the lifted Hessian, split into its multiplication part and
/// its kernel part (the kernel matrix carries the `1/N` weight, so the
/// block operator is the plain sum).
#[derive(Debug, Clone)]
pub struct BlockSplit {
    pub mult: DMatrix<f64>,
    pub kernel: DMatrix<f64>,
}

impl BlockSplit {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            mult: DMatrix::zeros(rows, cols),
            kernel: DMatrix::zeros(rows, cols),
        }
    }

    pub fn full(&self) -> DMatrix<f64> {
        &self.mult + &self.kernel
    }

    pub fn to_operator(&self, n: usize, dim_in: usize, dim_out: usize) -> LiftedOperator {
        LiftedOperator::new(self.full(), n, dim_in, dim_out)
    }
}

/// The 3x3 operator matrix of the lifted Hamiltonian Hessian at a triple,
/// with per-block multiplication/kernel splits. Index order is
/// (state, costate, control); `p` denotes the costate slot.
#[derive(Debug, Clone)]
pub struct BlockHessian {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub xx: BlockSplit,
    pub xp: BlockSplit,
    pub xu: BlockSplit,
    pub px: BlockSplit,
    pub pp: BlockSplit,
    pub pu: BlockSplit,
    pub ux: BlockSplit,
    pub up: BlockSplit,
    pub uu: BlockSplit,
}

impl BlockHessian {
    /// Full `(2d + m) N` square matrix in `[X | Psi | u]` ordering.
    pub fn assembled(&self) -> DMatrix<f64> {
        let (nd, nm) = (self.n * self.d, self.n * self.m);
        let total = 2 * nd + nm;
        let mut out = DMatrix::zeros(total, total);
        let blocks = [
            (0, 0, self.xx.full()),
            (0, nd, self.xp.full()),
            (0, 2 * nd, self.xu.full()),
            (nd, 0, self.px.full()),
            (nd, nd, self.pp.full()),
            (nd, 2 * nd, self.pu.full()),
            (2 * nd, 0, self.ux.full()),
            (2 * nd, nd, self.up.full()),
            (2 * nd, 2 * nd, self.uu.full()),
        ];
        for (r, c, b) in blocks {
            out.view_mut((r, c), b.shape()).copy_from(&b);
        }
        out
    }

    /// Symmetry defect of the assembled matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let a = self.assembled();
        (&a - a.transpose()).amax()
    }
}

/// Builds the block Hessian of the lifted Hamiltonian at `(x, psi, u)`
/// from the model's second derivatives: multiplication parts from the
/// pointwise Hamiltonian Hessian, kernel parts (weight `1/N`) from the
/// measure-derivative kernels of the dynamics and costs.
pub fn assemble_block_hessian(
    model: &dyn ControlProblem,
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
) -> Result<BlockHessian> {
    let (n, d, m) = (x.len(), model.state_dim(), model.control_dim());
    assert_eq!(x.dim(), d);
    assert_eq!(psi.dim(), d);
    assert_eq!(u.dim(), m);
    let mu = x.law()?;
    let w = 1.0 / n as f64;

    let mut bh = BlockHessian {
        n,
        d,
        m,
        xx: BlockSplit::zeros(n * d, n * d),
        xp: BlockSplit::zeros(n * d, n * d),
        xu: BlockSplit::zeros(n * d, n * m),
        px: BlockSplit::zeros(n * d, n * d),
        pp: BlockSplit::zeros(n * d, n * d),
        pu: BlockSplit::zeros(n * d, n * m),
        ux: BlockSplit::zeros(n * m, n * d),
        up: BlockSplit::zeros(n * m, n * d),
        uu: BlockSplit::zeros(n * m, n * m),
    };

    for i in 0..n {
        let (xi, pi, ui) = (x.atom(i), psi.atom(i), u.atom(i));
        let dv_x = model.dv_x(&mu, &xi, &ui);
        let dv_u = model.dv_u(&mu, &xi, &ui);

        // Pointwise second derivatives of H = <psi, v> - L.
        let mut m_xx = model.d2v_xx_psi(&mu, &xi, &ui, &pi) - model.d2l_xx(&mu, &xi, &ui);
        // Probe-slot derivative of the kernel sum contributes to the
        // multiplication symbol (it is diagonal but measure-dependent).
        for l in 0..n {
            let (xl, pl, ul) = (x.atom(l), psi.atom(l), u.atom(l));
            m_xx += (model.dy_dmu_v_psi(&mu, &xl, &ul, &xi, &pl)
                - model.dy_dmu_l(&mu, &xl, &ul, &xi))
                * w;
        }
        let m_xu = model.d2v_xu_psi(&mu, &xi, &ui, &pi) - model.d2l_xu(&mu, &xi, &ui);
        let m_uu = model.d2v_uu_psi(&mu, &xi, &ui, &pi) - model.d2l_uu(&mu, &xi, &ui);

        bh.xx.mult.view_mut((i * d, i * d), (d, d)).copy_from(&m_xx);
        bh.xu.mult.view_mut((i * d, i * m), (d, m)).copy_from(&m_xu);
        bh.ux
            .mult
            .view_mut((i * m, i * d), (m, d))
            .copy_from(&m_xu.transpose());
        bh.uu.mult.view_mut((i * m, i * m), (m, m)).copy_from(&m_uu);
        bh.xp
            .mult
            .view_mut((i * d, i * d), (d, d))
            .copy_from(&dv_x.transpose());
        bh.px.mult.view_mut((i * d, i * d), (d, d)).copy_from(&dv_x);
        bh.pu.mult.view_mut((i * d, i * m), (d, m)).copy_from(&dv_u);
        bh.up
            .mult
            .view_mut((i * m, i * d), (m, d))
            .copy_from(&dv_u.transpose());

        for j in 0..n {
            let xj = x.atom(j);
            let (uj, pj) = (u.atom(j), psi.atom(j));

            // Constraint kernel enters the state-costate cross blocks.
            let k_px = model.dv_mu(&mu, &xi, &ui, &xj) * w;
            bh.px.kernel.view_mut((i * d, j * d), (d, d)).copy_from(&k_px);
            let k_xp = model.dv_mu(&mu, &xj, &uj, &xi).transpose() * w;
            bh.xp.kernel.view_mut((i * d, j * d), (d, d)).copy_from(&k_xp);

            // State-state kernel: mixed base/measure derivatives from both
            // owners plus the second measure derivative.
            let mut k_xx = model.dmu_dxv_psi(&mu, &xi, &ui, &xj, &pi)
                - model.dmu_dlx(&mu, &xi, &ui, &xj);
            k_xx += (model.dmu_dxv_psi(&mu, &xj, &uj, &xi, &pj)
                - model.dmu_dlx(&mu, &xj, &uj, &xi))
                .transpose();
            let mut second = DMatrix::zeros(d, d);
            for l in 0..n {
                let (xl, pl, ul) = (x.atom(l), psi.atom(l), u.atom(l));
                second += model.d2mu_v_psi(&mu, &xl, &ul, &xi, &xj, &pl)
                    - model.d2mu_l(&mu, &xl, &ul, &xi, &xj);
            }
            k_xx += second * w;
            bh.xx
                .kernel
                .view_mut((i * d, j * d), (d, d))
                .copy_from(&(k_xx * w));
        }
    }

    let defect = bh.symmetry_defect();
    let scale = bh.assembled().amax().max(1.0);
    if defect > HESSIAN_SYMMETRY_TOL * scale {
        return Err(Error::Assembly {
            detail: format!("block Hessian symmetry defect {defect:.3e}"),
        });
    }
    Ok(bh)
}

/// The six Hessian blocks entering the reduction, in any realization
/// (full lift, horizontal compression, or pointwise vertical symbols).
#[derive(Debug, Clone)]
pub struct HamiltonianBlocks {
    pub xx: DMatrix<f64>,
    pub xu: DMatrix<f64>,
    pub ux: DMatrix<f64>,
    pub px: DMatrix<f64>,
    pub pu: DMatrix<f64>,
    pub uu: DMatrix<f64>,
}

impl HamiltonianBlocks {
    pub fn from_full(bh: &BlockHessian) -> Self {
        Self {
            xx: bh.xx.full(),
            xu: bh.xu.full(),
            ux: bh.ux.full(),
            px: bh.px.full(),
            pu: bh.pu.full(),
            uu: bh.uu.full(),
        }
    }

    /// Pointwise multiplication symbols at one atom.
    pub fn vertical_symbol(bh: &BlockHessian, atom: usize) -> Self {
        let (d, m) = (bh.d, bh.m);
        let view = |mat: &DMatrix<f64>, r: usize, c: usize, rs: usize, cs: usize| {
            mat.view((atom * r, atom * c), (rs, cs)).into_owned()
        };
        Self {
            xx: view(&bh.xx.mult, d, d, d, d),
            xu: view(&bh.xu.mult, d, m, d, m),
            ux: view(&bh.ux.mult, m, d, m, d),
            px: view(&bh.px.mult, d, d, d, d),
            pu: view(&bh.pu.mult, d, m, d, m),
            uu: view(&bh.uu.mult, m, m, m, m),
        }
    }
}

/// Outcome of a Hautus test over the closed right half plane.
#[derive(Debug, Clone, Serialize)]
pub struct HautusReport {
    pub pass: bool,
    /// Smallest `sigma_min([A - lambda I, B])` over tested eigenvalues;
    /// `None` when the spectrum is already stable.
    pub worst_margin: Option<f64>,
    pub tested_eigenvalues: usize,
}

/// Hautus stabilizability test: every eigenvalue of `a` with real part
/// `>= -tol` must satisfy `sigma_min([a - lambda I, b]) > tol`.
/// Detectability of `(A, C)` is the same test on `(A^T, C^T)`.
pub fn hautus_stabilizability(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: f64,
) -> Result<HautusReport> {
    let n = a.nrows();
    let eigs = eigenvalues(a)?;
    let mut tested: Vec<nalgebra::Complex<f64>> = Vec::new();
    let mut worst: Option<f64> = None;
    for ev in eigs.iter() {
        if ev.re < -tol {
            continue;
        }
        if tested.iter().any(|t| (t - ev).norm() < 1e-9) {
            continue;
        }
        tested.push(*ev);
        let ac = to_complex(a);
        let bc = to_complex(b);
        let mut aug = DMatrix::from_element(n, n + b.ncols(), nalgebra::Complex::new(0.0, 0.0));
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = ac[(i, j)];
            }
            aug[(i, i)] -= ev;
            for j in 0..b.ncols() {
                aug[(i, n + j)] = bc[(i, j)];
            }
        }
        let sigma = sigma_min_complex(&aug);
        worst = Some(worst.map_or(sigma, |w: f64| w.min(sigma)));
    }
    Ok(HautusReport {
        pass: worst.map_or(true, |w| w > tol),
        worst_margin: worst,
        tested_eigenvalues: tested.len(),
    })
}

/// Structural checks and reduced data extracted from Hessian blocks.
#[derive(Debug, Clone)]
pub struct SchurReduction {
    pub uu_condition: f64,
    pub uu_invertible: bool,
    /// Symmetrized Schur complement `H_xu H_uu^{-1} H_ux - H_xx`.
    pub q: Option<DMatrix<f64>>,
    pub q_min_eigenvalue: f64,
    pub q_factorizable: bool,
    pub a_tilde: Option<DMatrix<f64>>,
    pub c_tilde: Option<DMatrix<f64>>,
    pub b_eff: DMatrix<f64>,
    pub r_inv: Option<DMatrix<f64>>,
}

/// Schur-reduces the blocks: inverts the control curvature, forms the
/// drift `A = H_px - H_pu H_uu^{-1} H_ux` and the observation factor
/// `C` with `Q = C^T C`. Failures are reported, not thrown, so that
/// downstream diagnostics can still run.
pub fn schur_reduce_blocks(blocks: &HamiltonianBlocks, cond_cap: f64) -> SchurReduction {
    let uu_condition = condition_number(&blocks.uu);
    let uu_invertible = uu_condition.is_finite() && uu_condition < cond_cap;
    let mut red = SchurReduction {
        uu_condition,
        uu_invertible,
        q: None,
        q_min_eigenvalue: f64::NAN,
        q_factorizable: false,
        a_tilde: None,
        c_tilde: None,
        b_eff: blocks.pu.clone(),
        r_inv: None,
    };
    if !uu_invertible {
        return red;
    }
    let r_inv = match invert(&blocks.uu, "schur_reduce") {
        Ok(inv) => inv,
        Err(_) => return red,
    };
    red.a_tilde = Some(&blocks.px - &blocks.pu * &r_inv * &blocks.ux);
    let q = symmetrize(&(&blocks.xu * &r_inv * &blocks.ux - &blocks.xx));
    match psd_factor(&q, PSD_CLAMP_TOL) {
        Ok((c, min_eig)) => {
            red.q_min_eigenvalue = min_eig;
            red.q_factorizable = true;
            red.c_tilde = Some(c);
        }
        Err(_) => {
            let eig = q.clone().symmetric_eigen();
            red.q_min_eigenvalue = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        }
    }
    red.q = Some(q);
    red.r_inv = Some(r_inv);
    red
}

/// Public entry matching the certification chain: reduction of the full
/// lifted blocks.
pub fn schur_reduce(bh: &BlockHessian) -> SchurReduction {
    schur_reduce_blocks(&HamiltonianBlocks::from_full(bh), COND_CAP)
}

/// Pass/fail summary of the reduction-level hypotheses on one realization.
#[derive(Debug, Clone, Serialize)]
pub struct LtReport {
    pub uu_condition: f64,
    pub uu_invertible: bool,
    pub q_min_eigenvalue: f64,
    pub q_factorizable: bool,
    pub stabilizability: HautusReport,
    pub detectability: HautusReport,
    pub pass: bool,
}

fn empty_hautus() -> HautusReport {
    HautusReport {
        pass: false,
        worst_margin: None,
        tested_eigenvalues: 0,
    }
}

/// Runs the reduction-level checks on a set of blocks.
pub fn lt_checks(
    blocks: &HamiltonianBlocks,
    cond_cap: f64,
    hautus_tol: f64,
) -> Result<LtReport> {
    let red = schur_reduce_blocks(blocks, cond_cap);
    let (stab, det) = match (&red.a_tilde, &red.c_tilde) {
        (Some(a), Some(c)) => (
            hautus_stabilizability(a, &red.b_eff, hautus_tol)?,
            hautus_stabilizability(&a.transpose(), &c.transpose(), hautus_tol)?,
        ),
        _ => (empty_hautus(), empty_hautus()),
    };
    let pass = red.uu_invertible && red.q_factorizable && stab.pass && det.pass;
    Ok(LtReport {
        uu_condition: red.uu_condition,
        uu_invertible: red.uu_invertible,
        q_min_eigenvalue: red.q_min_eigenvalue,
        q_factorizable: red.q_factorizable,
        stabilizability: stab,
        detectability: det,
        pass,
    })
}

/// Decoupling transform `T = [[I + E P, E], [P, I]]` and its closed-form
/// inverse `T^{-1} = [[I, -E], [-P, I + P E]]`.
pub fn build_transform(p: &DMatrix<f64>, e: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = p.nrows();
    let eye = DMatrix::identity(n, n);
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&(&eye + e * p));
    t.view_mut((0, n), (n, n)).copy_from(e);
    t.view_mut((n, 0), (n, n)).copy_from(p);
    t.view_mut((n, n), (n, n)).copy_from(&eye);
    let mut t_inv = DMatrix::zeros(2 * n, 2 * n);
    t_inv.view_mut((0, 0), (n, n)).copy_from(&eye);
    t_inv.view_mut((0, n), (n, n)).copy_from(&(-e));
    t_inv.view_mut((n, 0), (n, n)).copy_from(&(-p));
    t_inv.view_mut((n, n), (n, n)).copy_from(&(&eye + p * e));
    (t, t_inv)
}

/// Defect of the similarity `T [[A, -G], [Q, -A^T]] T^{-1} =
/// [[A + G P, 0], [0, -(A + G P)^T]]`, measured as the sum of the
/// off-diagonal block norms plus the deviation of the diagonal blocks.
pub fn diagonalization_residual(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    t: &DMatrix<f64>,
    t_inv: &DMatrix<f64>,
) -> f64 {
    let n = a.nrows();
    let p = t.view((n, 0), (n, n)).into_owned();
    let a_cl = a + g * &p;
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-g));
    ham.view_mut((n, 0), (n, n)).copy_from(q);
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let diag = t * ham * t_inv;
    let d11 = diag.view((0, 0), (n, n)).into_owned();
    let d12 = diag.view((0, n), (n, n)).into_owned();
    let d21 = diag.view((n, 0), (n, n)).into_owned();
    let d22 = diag.view((n, n), (n, n)).into_owned();
    d12.norm() + d21.norm() + (&d11 - &a_cl).norm() + (d22 + a_cl.transpose()).norm()
}

/// Transient amplification and decay rate of `exp(t A)`:
/// `beta = -abscissa * (1 - margin)` and `M = sup_t ||exp(t A)|| e^{beta t}`
/// over a grid of matrix exponentials.
pub fn decay_constants(a_closed: &DMatrix<f64>, margin: f64) -> Result<(f64, f64)> {
    let abscissa = spectral_abscissa(a_closed)?;
    if abscissa >= 0.0 {
        return Err(Error::UnstableMatrix { abscissa });
    }
    let beta = -abscissa * (1.0 - margin);
    let rate = -abscissa;
    let dt = 0.1 / rate;
    let horizon = 50.0 / rate;
    let steps = (horizon / dt).ceil() as usize;
    let step_matrix = (a_closed * dt).exp();
    let mut power = DMatrix::identity(a_closed.nrows(), a_closed.ncols());
    let mut m_const: f64 = 1.0;
    for k in 1..=steps {
        power = &power * &step_matrix;
        let envelope = spectral_norm(&power) * (beta * dt * k as f64).exp();
        m_const = m_const.max(envelope);
    }
    Ok((m_const, beta))
}

/// Per-atom vertical hypothesis check.
#[derive(Debug, Clone, Serialize)]
pub struct VerticalAtomReport {
    pub atom: usize,
    pub uu_invertible: bool,
    pub q_min_eigenvalue: f64,
    pub q_factorizable: bool,
    pub stabilizability: HautusReport,
    pub detectability: HautusReport,
    pub pass: bool,
}

/// Split hypothesis report: horizontal (group-compressed) checks,
/// per-atom vertical checks, and the independent full-lift re-run.
#[derive(Debug, Clone, Serialize)]
pub struct EtReport {
    pub horizontal: LtReport,
    pub vertical: Vec<VerticalAtomReport>,
    pub vertical_pass: bool,
    /// Worst coupling between the group-constant subspace and its
    /// complement over all blocks; nonzero values mean the block symbols
    /// are not constant on the groups.
    pub split_defect: f64,
    pub full: LtReport,
    pub pass: bool,
    /// Split pass implies full pass on this instance.
    pub implication_holds: bool,
}

/// Checks the intrinsic hypotheses through the horizontal/vertical split:
/// compresses every block to the position-group basis and runs the
/// reduction checks there, runs pointwise Hautus tests on the
/// multiplication symbols of duplicated atoms, then independently
/// re-verifies the full-lift checks.
pub fn check_et_hypotheses(
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
    bh: &BlockHessian,
    tol: f64,
) -> Result<EtReport> {
    let z = RandomVector::concat(&[x, psi, u]);
    let structure = GroupStructure::from_vector(&z, GROUP_TOL);
    let n = bh.n;

    // Compressions are computed unconditionally; a coupling between the
    // split subspaces is recorded as a defect instead of aborting, so
    // corrupted symbols still produce a full diagnostic report.
    let mut split_defect = 0.0_f64;
    let mut compress = |split: &BlockSplit, dim_in: usize, dim_out: usize| -> DMatrix<f64> {
        let a = split.full();
        let b_in = structure.horizontal_basis(dim_in);
        let b_out = structure.horizontal_basis(dim_out);
        let v_in = structure.vertical_basis(dim_in);
        let v_out = structure.vertical_basis(dim_out);
        let w = 1.0 / n as f64;
        if v_out.ncols() > 0 {
            split_defect = split_defect.max(((v_out.transpose() * &a * &b_in) * w).norm());
        }
        if v_in.ncols() > 0 {
            split_defect = split_defect.max(((b_out.transpose() * &a * &v_in) * w).norm());
        }
        (b_out.transpose() * a * b_in) * w
    };

    let horizontal_blocks = HamiltonianBlocks {
        xx: compress(&bh.xx, bh.d, bh.d),
        xu: compress(&bh.xu, bh.m, bh.d),
        ux: compress(&bh.ux, bh.d, bh.m),
        px: compress(&bh.px, bh.d, bh.d),
        pu: compress(&bh.pu, bh.m, bh.d),
        uu: compress(&bh.uu, bh.m, bh.m),
    };
    let horizontal = lt_checks(&horizontal_blocks, COND_CAP, HAUTUS_TOL)?;

    // Vertical checks only exist for atoms living in duplicated groups.
    let mut vertical = Vec::new();
    for members in &structure.groups {
        if members.len() < 2 {
            continue;
        }
        for &atom in members {
            let symbol = HamiltonianBlocks::vertical_symbol(bh, atom);
            let report = lt_checks(&symbol, COND_CAP, HAUTUS_TOL)?;
            vertical.push(VerticalAtomReport {
                atom,
                uu_invertible: report.uu_invertible,
                q_min_eigenvalue: report.q_min_eigenvalue,
                q_factorizable: report.q_factorizable,
                stabilizability: report.stabilizability,
                detectability: report.detectability,
                pass: report.pass,
            });
        }
    }
    let vertical_pass = vertical.iter().all(|v| v.pass);

    let full = lt_checks(&HamiltonianBlocks::from_full(bh), COND_CAP, HAUTUS_TOL)?;
    let pass = horizontal.pass && vertical_pass && split_defect <= tol;
    let implication_holds = !pass || full.pass;
    Ok(EtReport {
        horizontal,
        vertical,
        vertical_pass,
        split_defect,
        full,
        pass,
        implication_holds,
    })
}

/// Matrices serialized row-major for reports.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixData {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j])
    }
}

/// Everything the decay analysis produces: reduced matrices, Riccati and
/// Lyapunov solutions, the decoupling transform, decay constants, the
/// detectability feedback and all residuals, plus the hypothesis reports.
#[derive(Debug, Clone, Serialize)]
pub struct TurnpikeCertificate {
    pub n_states: usize,
    pub a_tilde: MatrixData,
    pub c_tilde: MatrixData,
    pub r_uu_inv: MatrixData,
    pub p: MatrixData,
    pub e: MatrixData,
    pub t: MatrixData,
    pub t_inv: MatrixData,
    pub m_const: f64,
    pub beta: f64,
    pub q_feedback: MatrixData,
    pub q_feedback_abscissa: f64,
    pub closed_loop_abscissa: f64,
    pub riccati_residual: f64,
    pub lyapunov_residual: f64,
    pub transform_identity_defect: f64,
    pub diag_residual: f64,
    /// Coupling `G = H_pu H_uu^{-1} H_up` entering the decoupled system.
    pub g: MatrixData,
    pub lt: LtReport,
    pub et: EtReport,
}

impl TurnpikeCertificate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        self.p.to_matrix()
    }
    pub fn coupling(&self) -> DMatrix<f64> {
        self.g.to_matrix()
    }
    pub fn closed_loop(&self) -> DMatrix<f64> {
        let a = self.a_tilde.to_matrix();
        &a + self.coupling() * self.p_matrix()
    }
}

/// Options for the certification chain.
#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub cond_cap: f64,
    pub hautus_tol: f64,
    pub decay_margin: f64,
    pub split_tol: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            cond_cap: COND_CAP,
            hautus_tol: HAUTUS_TOL,
            decay_margin: DECAY_MARGIN,
            split_tol: 1e-8,
        }
    }
}

/// Runs the full chain at a stationary triple: assembly (done by the
/// caller), reduction, hypothesis checks, Riccati, Lyapunov, transform,
/// decay constants and the detectability feedback.
pub fn certify(
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
    bh: &BlockHessian,
    opts: &CertifyOptions,
) -> Result<TurnpikeCertificate> {
    let blocks = HamiltonianBlocks::from_full(bh);
    let lt = lt_checks(&blocks, opts.cond_cap, opts.hautus_tol)?;
    let et = check_et_hypotheses(x, psi, u, bh, opts.split_tol)?;
    if !lt.uu_invertible {
        return Err(Error::HypothesisFailure {
            check: "control curvature invertibility",
            detail: format!("condition number {:.3e}", lt.uu_condition),
        });
    }
    if !lt.q_factorizable {
        return Err(Error::HypothesisFailure {
            check: "Schur complement positivity",
            detail: format!("min eigenvalue {:.3e}", lt.q_min_eigenvalue),
        });
    }
    if !lt.stabilizability.pass || !lt.detectability.pass {
        return Err(Error::HypothesisFailure {
            check: "stabilizability/detectability",
            detail: format!(
                "stabilizability margin {:?}, detectability margin {:?}",
                lt.stabilizability.worst_margin, lt.detectability.worst_margin
            ),
        });
    }

    let red = schur_reduce_blocks(&blocks, opts.cond_cap);
    let a = red.a_tilde.expect("reduction succeeded");
    let c = red.c_tilde.expect("factorization succeeded");
    let r_inv = red.r_inv.expect("reduction succeeded");
    let q = red.q.expect("reduction succeeded");
    let b_eff = red.b_eff;
    let g = symmetrize(&(&b_eff * &r_inv * b_eff.transpose()));

    let p = solve_riccati(&a, &b_eff, &r_inv, &c)?;
    let riccati_res = riccati_residual(&a, &g, &q, &p);
    let a_cl = &a + &g * &p;
    let e = solve_lyapunov(&a_cl, &g)?;
    let lyap_res = lyapunov_residual(&a_cl, &e, &g);
    let (t, t_inv) = build_transform(&p, &e);
    let identity_defect =
        (&t * &t_inv - DMatrix::identity(t.nrows(), t.ncols())).norm();
    let diag_res = diagonalization_residual(&a, &g, &q, &t, &t_inv);
    let (m_const, beta) = decay_constants(&a_cl, opts.decay_margin)?;

    // Detectability feedback via the dual Riccati equation: K = -C P_d
    // makes A^T + C^T K exponentially stable.
    let n = a.nrows();
    let p_dual = solve_riccati(
        &a.transpose(),
        &c.transpose(),
        &(-DMatrix::identity(n, n)),
        &DMatrix::identity(n, n),
    )?;
    let q_feedback = -(&c * &p_dual);
    let q_feedback_abscissa = spectral_abscissa(&(a.transpose() + c.transpose() * &q_feedback))?;
    if q_feedback_abscissa >= 0.0 {
        return Err(Error::UnstableMatrix {
            abscissa: q_feedback_abscissa,
        });
    }

    if identity_defect > TRANSFORM_IDENTITY_TOL * t.norm().max(1.0) {
        return Err(Error::ResidualTooLarge {
            equation: "transform identity",
            residual: identity_defect,
            tol: TRANSFORM_IDENTITY_TOL,
        });
    }
    if diag_res > MATRIX_EQUATION_TOL * (a.norm() + q.norm() + g.norm()).max(1.0) {
        return Err(Error::ResidualTooLarge {
            equation: "diagonalization",
            residual: diag_res,
            tol: MATRIX_EQUATION_TOL,
        });
    }

    Ok(TurnpikeCertificate {
        n_states: n,
        a_tilde: MatrixData::from(&a),
        c_tilde: MatrixData::from(&c),
        r_uu_inv: MatrixData::from(&r_inv),
        p: MatrixData::from(&p),
        e: MatrixData::from(&e),
        t: MatrixData::from(&t),
        t_inv: MatrixData::from(&t_inv),
        m_const,
        beta,
        q_feedback: MatrixData::from(&q_feedback),
        q_feedback_abscissa,
        closed_loop_abscissa: spectral_abscissa(&a_cl)?,
        riccati_residual: riccati_res,
        lyapunov_residual: lyap_res,
        transform_identity_defect: identity_defect,
        diag_residual: diag_res,
        lt,
        et,
        g: MatrixData::from(&g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LqMeanField, NonlinearAttraction, ScalarLq};
    use crate::static_kkt::hamiltonian_gradient;
    use crate::tolerances::FD_STEP;
    use nalgebra::DVector;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rv(rows: usize, cols: usize, data: &[f64]) -> RandomVector {
        RandomVector::new(DMatrix::from_row_slice(rows, cols, data))
    }

    fn scalar_blocks_at_origin() -> BlockHessian {
        let model = ScalarLq { a: 1.0, b: 1.0 };
        let zero = rv(1, 1, &[0.0]);
        assemble_block_hessian(&model, &zero, &zero, &zero).unwrap()
    }

    #[test]
    fn scalar_lq_blocks_at_origin() {
        // Hand second derivatives of psi(ax + bu) - x^2 - u^2.
        let bh = scalar_blocks_at_origin();
        assert!((bh.xx.full()[(0, 0)] + 2.0).abs() < 1e-15);
        assert!((bh.px.full()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((bh.pu.full()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((bh.uu.full()[(0, 0)] + 2.0).abs() < 1e-15);
        assert_eq!(bh.xu.full()[(0, 0)], 0.0);
        assert_eq!(bh.pp.full()[(0, 0)], 0.0);
    }

    #[test]
    fn mean_field_kernels_appear_only_in_state_blocks() {
        let model = LqMeanField::isotropic(1, 1, -1.0, 0.4, 1.0, 1.0, 0.5, 1.0);
        let n = 4;
        let x = rv(n, 1, &[0.1, -0.2, 0.3, 0.0]);
        let psi = rv(n, 1, &[0.2, 0.1, -0.1, 0.3]);
        let u = rv(n, 1, &[0.0, 0.1, 0.2, -0.3]);
        let bh = assemble_block_hessian(&model, &x, &psi, &u).unwrap();
        let w = 1.0 / n as f64;
        // Constraint kernel lands in the costate-state cross blocks.
        for i in 0..n {
            for j in 0..n {
                assert!((bh.px.kernel[(i, j)] - 0.4 * w).abs() < 1e-15);
                assert!((bh.xp.kernel[(i, j)] - 0.4 * w).abs() < 1e-15);
                // State-state kernel from the interaction cost.
                assert!((bh.xx.kernel[(i, j)] - 0.5 * w).abs() < 1e-14);
            }
        }
        // No kernels away from the state index.
        assert_eq!(bh.pu.kernel.norm(), 0.0);
        assert_eq!(bh.uu.kernel.norm(), 0.0);
        assert_eq!(bh.up.kernel.norm(), 0.0);
        assert_eq!(bh.pp.full().norm(), 0.0);
    }

    #[test]
    fn block_action_matches_differenced_gradients() {
        // The strongest assembly check: directional finite differences of
        // the Hamiltonian gradient against the assembled operator, on a
        // genuinely nonlinear interaction model.
        let models: Vec<Box<dyn ControlProblem>> = vec![
            Box::new(LqMeanField::isotropic(2, 1, -0.6, 0.3, 1.0, 1.0, 0.7, 1.1)),
            Box::new(NonlinearAttraction::new(2, 2, 1.0, 0.9, 1.2, 1.0, 1.0)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in &models {
            let (n, d, m) = (4, model.state_dim(), model.control_dim());
            let x = RandomVector::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.8..0.8)));
            let psi =
                RandomVector::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.8..0.8)));
            let u = RandomVector::new(DMatrix::from_fn(n, m, |_, _| rng.random_range(-0.8..0.8)));
            let assembled = assemble_block_hessian(model.as_ref(), &x, &psi, &u)
                .unwrap()
                .assembled();
            for _ in 0..4 {
                let dx =
                    RandomVector::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)));
                let dp =
                    RandomVector::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)));
                let du =
                    RandomVector::new(DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)));
                let h = FD_STEP;
                let eval = |sign: f64| -> DVector<f64> {
                    let xs = RandomVector::new(x.values() + dx.values() * (sign * h));
                    let ps = RandomVector::new(psi.values() + dp.values() * (sign * h));
                    let us = RandomVector::new(u.values() + du.values() * (sign * h));
                    let (gx, gp, gu) = hamiltonian_gradient(model.as_ref(), &xs, &ps, &us).unwrap();
                    let mut out = DVector::zeros(n * (2 * d + m));
                    out.rows_mut(0, n * d).copy_from(&gx.flatten());
                    out.rows_mut(n * d, n * d).copy_from(&gp.flatten());
                    out.rows_mut(2 * n * d, n * m).copy_from(&gu.flatten());
                    out
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                let mut dir = DVector::zeros(n * (2 * d + m));
                dir.rows_mut(0, n * d).copy_from(&dx.flatten());
                dir.rows_mut(n * d, n * d).copy_from(&dp.flatten());
                dir.rows_mut(2 * n * d, n * m).copy_from(&du.flatten());
                let action = &assembled * dir;
                let scale = action.amax().max(1.0);
                assert!(
                    (&action - &fd).amax() / scale < 1e-5,
                    "defect {}",
                    (&action - &fd).amax() / scale
                );
            }
        }
    }

    #[test]
    fn schur_reduction_of_the_scalar_model() {
        let bh = scalar_blocks_at_origin();
        let red = schur_reduce(&bh);
        assert!(red.uu_invertible);
        // A = a - b (-1/2) * 0 = 1; Q = 0 - (-2) = 2; C = sqrt(2).
        assert!((red.a_tilde.as_ref().unwrap()[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((red.q.as_ref().unwrap()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((red.c_tilde.as_ref().unwrap()[(0, 0)].abs() - 2.0_f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn zero_observation_blocks_fail_the_factor_check_only() {
        // L independent of x gives Q = 0: factorization succeeds with
        // C = 0 and detectability then fails downstream.
        let blocks = HamiltonianBlocks {
            xx: DMatrix::zeros(1, 1),
            xu: DMatrix::zeros(1, 1),
            ux: DMatrix::zeros(1, 1),
            px: DMatrix::from_element(1, 1, 1.0),
            pu: DMatrix::from_element(1, 1, 1.0),
            uu: DMatrix::from_element(1, 1, -2.0),
        };
        let report = lt_checks(&blocks, COND_CAP, HAUTUS_TOL).unwrap();
        assert!(report.uu_invertible);
        assert!(report.q_factorizable);
        assert!(report.stabilizability.pass);
        assert!(!report.detectability.pass);
        assert!(!report.pass);
    }

    #[test]
    fn hautus_examples() {
        // (a, b) = (1, 1): margin sigma_min([0, 1]) = 1.
        let report = hautus_stabilizability(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            HAUTUS_TOL,
        )
        .unwrap();
        assert!(report.pass);
        assert!((report.worst_margin.unwrap() - 1.0).abs() < 1e-12);

        // Uncontrollable unstable mode.
        let report = hautus_stabilizability(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.0),
            HAUTUS_TOL,
        )
        .unwrap();
        assert!(!report.pass);

        // Already stable: nothing to test.
        let report = hautus_stabilizability(
            &DMatrix::from_element(1, 1, -1.0),
            &DMatrix::from_element(1, 1, 0.0),
            HAUTUS_TOL,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.worst_margin.is_none());
    }

    #[test]
    fn decay_constants_examples() {
        // Scalar -sqrt(2): beta = 0.95 sqrt(2) and no transient growth.
        let (m, beta) = decay_constants(
            &DMatrix::from_element(1, 1, -(2.0_f64.sqrt())),
            DECAY_MARGIN,
        )
        .unwrap();
        assert!((beta - 0.95 * 2.0_f64.sqrt()).abs() < 1e-12);
        assert!((m - 1.0).abs() < 1e-9);

        // Normal matrix at margin zero: exact semigroup bound M = 1.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.3, -2.0]);
        let (m, _) = decay_constants(&a, 0.0).unwrap();
        assert!((m - 1.0).abs() < 1e-9);

        // Jordan block: transient growth detected.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let (m, _) = decay_constants(&a, DECAY_MARGIN).unwrap();
        assert!(m > 1.5);

        assert!(decay_constants(&DMatrix::from_element(1, 1, 0.1), DECAY_MARGIN).is_err());
    }

    #[test]
    fn transform_identities() {
        // Scalar closed-form data: exact algebra up to the solves.
        let p = DMatrix::from_element(1, 1, 2.0 + 2.0 * 2.0_f64.sqrt());
        let e = DMatrix::from_element(1, 1, -1.0 / (4.0 * 2.0_f64.sqrt()));
        let (t, t_inv) = build_transform(&p, &e);
        assert!((&t * &t_inv - DMatrix::identity(2, 2)).norm() < 1e-14);
        let a = DMatrix::from_element(1, 1, 1.0);
        let g = DMatrix::from_element(1, 1, -0.5);
        let q = DMatrix::from_element(1, 1, 2.0);
        assert!(diagonalization_residual(&a, &g, &q, &t, &t_inv) < 1e-10);

        // Decoupled trivial system: identity transform, zero residual.
        let zero = DMatrix::zeros(1, 1);
        let (t, t_inv) = build_transform(&zero, &zero);
        assert_eq!(t, DMatrix::identity(2, 2));
        let a = DMatrix::from_element(1, 1, -1.0);
        assert_eq!(diagonalization_residual(&a, &zero, &zero, &t, &t_inv), 0.0);

        // Random P, E still give an exact inverse.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let e = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let (t, t_inv) = build_transform(&p, &e);
        assert!((&t * &t_inv - DMatrix::identity(6, 6)).norm() < 1e-12);
    }

    #[test]
    fn certificate_for_the_scalar_model() {
        let bh = scalar_blocks_at_origin();
        let zero = rv(1, 1, &[0.0]);
        let cert = certify(&zero, &zero, &zero, &bh, &CertifyOptions::default()).unwrap();
        let expected_p = 2.0 + 2.0 * 2.0_f64.sqrt();
        assert!((cert.p.to_matrix()[(0, 0)] - expected_p).abs() < 1e-10);
        assert!((cert.closed_loop_abscissa + 2.0_f64.sqrt()).abs() < 1e-10);
        let expected_e = -1.0 / (4.0 * 2.0_f64.sqrt());
        assert!((cert.e.to_matrix()[(0, 0)] - expected_e).abs() < 1e-10);
        assert!(cert.riccati_residual <= 1e-10);
        assert!(cert.lyapunov_residual <= 1e-10);
        assert!(cert.diag_residual <= 1e-10);
        assert!(cert.transform_identity_defect <= 1e-12);
        assert!(cert.lt.pass);
        assert!(cert.et.pass);
        assert!(cert.et.implication_holds);
        assert!(cert.q_feedback_abscissa < 0.0);
        assert!((cert.beta - 0.95 * 2.0_f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn certificate_for_a_mean_field_ensemble() {
        let model = LqMeanField::isotropic(2, 2, -0.5, 0.25, 1.0, 1.0, 0.5, 1.0);
        let n = 8;
        let zero_d = RandomVector::zeros(n, 2);
        let zero_m = RandomVector::zeros(n, 2);
        let bh = assemble_block_hessian(&model, &zero_d, &zero_d, &zero_m).unwrap();
        let cert = certify(&zero_d, &zero_d, &zero_m, &bh, &CertifyOptions::default()).unwrap();
        assert!(cert.riccati_residual <= 1e-8);
        assert!(cert.lyapunov_residual <= 1e-8);
        assert!(cert.diag_residual <= 1e-8);
        assert!(cert.lt.pass && cert.et.pass && cert.et.implication_holds);
    }

    #[test]
    fn vertical_split_symbols_on_a_duplicated_pair() {
        // Duplicated pair at the origin: the vertical symbols equal the
        // scalar blocks, and the vertical observation check passes with
        // Q_vert = 2.
        let model = ScalarLq { a: 1.0, b: 1.0 };
        let zero = RandomVector::zeros(2, 1);
        let bh = assemble_block_hessian(&model, &zero, &zero, &zero).unwrap();
        let et = check_et_hypotheses(&zero, &zero, &zero, &bh, 1e-8).unwrap();
        assert_eq!(et.vertical.len(), 2);
        for v in &et.vertical {
            assert!(v.pass);
            assert!((v.q_min_eigenvalue - 2.0).abs() < 1e-12);
        }
        assert!(et.pass && et.full.pass && et.implication_holds);

        // Corrupt the control column of the costate row at atom 0: the
        // vertical stabilizability test and the full-lift test fail
        // together (the drift symbol stays unstable with a = 1).
        let mut corrupted = bh.clone();
        corrupted.pu.mult[(0, 0)] = 0.0;
        corrupted.up.mult[(0, 0)] = 0.0;
        let et = check_et_hypotheses(&zero, &zero, &zero, &corrupted, 1e-8).unwrap();
        assert!(!et.vertical[0].stabilizability.pass);
        assert!(!et.pass);
        assert!(!et.full.pass);
        assert!(et.implication_holds);
    }

    #[test]
    fn injective_triples_have_no_vertical_component() {
        let model = ScalarLq { a: 1.0, b: 1.0 };
        let x = rv(3, 1, &[0.1, 0.2, 0.3]);
        let psi = rv(3, 1, &[0.0, 0.1, -0.1]);
        let u = rv(3, 1, &[0.2, 0.0, 0.1]);
        let bh = assemble_block_hessian(&model, &x, &psi, &u).unwrap();
        let et = check_et_hypotheses(&x, &psi, &u, &bh, 1e-8).unwrap();
        assert!(et.vertical.is_empty());
        // Horizontal equals the full check when every group is a singleton.
        assert_eq!(et.horizontal.pass, et.full.pass);
    }
}
