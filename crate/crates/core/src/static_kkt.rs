//! Static first-order analysis: the lifted Hamiltonian and its gradient,
//! a damped Newton solver for stationary triples, the constraint
//! differential with surjectivity diagnostics, transfers between the
//! particle and distinct-position formulations, and the intrinsic
//! optimality residuals at a stationary point.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::{GroupStructure, RandomVector};
use crate::linalg::{condition_number, sigma_min};
use crate::measure::{barycentric_projection, EmpiricalMeasure, MultiplierMap};
use crate::model::ControlProblem;
use crate::spectral::assemble_block_hessian;
use crate::tolerances::GROUP_TOL;

/// Value of the lifted Hamiltonian
/// `(1/N) sum_i [<psi_i, v(mu, x_i, u_i)> - L(mu, x_i, u_i)]`.
pub fn lifted_hamiltonian(
    model: &dyn ControlProblem,
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
) -> Result<f64> {
    let mu = x.law()?;
    let mut acc = 0.0;
    for i in 0..x.len() {
        let (xi, pi, ui) = (x.atom(i), psi.atom(i), u.atom(i));
        acc += pi.dot(&model.velocity(&mu, &xi, &ui)) - model.running_cost(&mu, &xi, &ui);
    }
    let value = acc / x.len() as f64;
    if !value.is_finite() {
        return Err(Error::EvaluatorFailure {
            name: "lifted_hamiltonian",
            detail: "non-finite value".into(),
        });
    }
    Ok(value)
}

/// Gradient of the lifted Hamiltonian in the lifted inner product,
/// returned per slot. The state component carries the measure-kernel sum
/// over all atoms.
pub fn hamiltonian_gradient(
    model: &dyn ControlProblem,
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
) -> Result<(RandomVector, RandomVector, RandomVector)> {
    let (n, d, m) = (x.len(), model.state_dim(), model.control_dim());
    let mu = x.law()?;
    let w = 1.0 / n as f64;
    let mut gx = RandomVector::zeros(n, d);
    let mut gp = RandomVector::zeros(n, d);
    let mut gu = RandomVector::zeros(n, m);
    for i in 0..n {
        let (xi, pi, ui) = (x.atom(i), psi.atom(i), u.atom(i));
        let mut grad_x =
            model.dv_x(&mu, &xi, &ui).transpose() * &pi - model.dl_x(&mu, &xi, &ui);
        for j in 0..n {
            let (xj, pj, uj) = (x.atom(j), psi.atom(j), u.atom(j));
            grad_x += (model.dv_mu(&mu, &xj, &uj, &xi).transpose() * pj
                - model.dl_mu(&mu, &xj, &uj, &xi))
                * w;
        }
        gx.set_atom(i, &grad_x);
        gp.set_atom(i, &model.velocity(&mu, &xi, &ui));
        gu.set_atom(
            i,
            &(model.dv_u(&mu, &xi, &ui).transpose() * &pi - model.dl_u(&mu, &xi, &ui)),
        );
    }
    for (name, v) in [("grad_x", &gx), ("grad_psi", &gp), ("grad_u", &gu)] {
        if v.values().iter().any(|e| !e.is_finite()) {
            return Err(Error::EvaluatorFailure {
                name: "hamiltonian_gradient",
                detail: name.to_string(),
            });
        }
    }
    Ok((gx, gp, gu))
}

/// Lifted norm of the stacked gradient.
pub fn gradient_norm(gx: &RandomVector, gp: &RandomVector, gu: &RandomVector) -> f64 {
    (gx.norm().powi(2) + gp.norm().powi(2) + gu.norm().powi(2)).sqrt()
}

/// Stationary triple of the static problem with its distinct-position
/// shadows: the state-costate ensemble, the full state-costate-control
/// ensemble, and the barycentric multiplier.
#[derive(Debug, Clone)]
pub struct StationaryTriple {
    pub x: RandomVector,
    pub psi: RandomVector,
    pub u: RandomVector,
    pub residual_norm: f64,
    /// Largest per-particle constraint violation `|v(mu, x_i, u_i)|`.
    pub constraint_inf: f64,
    pub iterations: usize,
    pub residual_trace: Vec<f64>,
    pub nu_bar: EmpiricalMeasure,
    pub bnu_bar: EmpiricalMeasure,
    pub lambda_bar: MultiplierMap,
}

impl StationaryTriple {
    /// Packages raw vectors as a triple, computing the residual, the
    /// feasibility defect and the distinct-position shadows.
    pub fn from_parts(
        model: &dyn ControlProblem,
        x: RandomVector,
        psi: RandomVector,
        u: RandomVector,
    ) -> Result<Self> {
        let (gx, gp, gu) = hamiltonian_gradient(model, &x, &psi, &u)?;
        let residual_norm = gradient_norm(&gx, &gp, &gu);
        let mu = x.law()?;
        let mut constraint_inf = 0.0_f64;
        for i in 0..x.len() {
            constraint_inf =
                constraint_inf.max(model.velocity(&mu, &x.atom(i), &u.atom(i)).norm());
        }
        let (nu_bar, bnu_bar, lambda_bar) = make_shadows(&x, &psi, &u)?;
        Ok(Self {
            x,
            psi,
            u,
            residual_norm,
            constraint_inf,
            iterations: 0,
            residual_trace: Vec::new(),
            nu_bar,
            bnu_bar,
            lambda_bar,
        })
    }
}

/// Damped-Newton options.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub cond_cap: f64,
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 60,
            cond_cap: crate::tolerances::COND_CAP,
            min_step: (0.5_f64).powi(20),
        }
    }
}

fn stack(gx: &RandomVector, gp: &RandomVector, gu: &RandomVector) -> DVector<f64> {
    let mut out = DVector::zeros(
        gx.len() * gx.dim() + gp.len() * gp.dim() + gu.len() * gu.dim(),
    );
    let mut off = 0;
    for part in [gx, gp, gu] {
        let flat = part.flatten();
        out.rows_mut(off, flat.len()).copy_from(&flat);
        off += flat.len();
    }
    out
}

fn unstack(z: &DVector<f64>, n: usize, d: usize, m: usize) -> (RandomVector, RandomVector, RandomVector) {
    let x = RandomVector::from_flat(&z.rows(0, n * d).into_owned(), n, d);
    let psi = RandomVector::from_flat(&z.rows(n * d, n * d).into_owned(), n, d);
    let u = RandomVector::from_flat(&z.rows(2 * n * d, n * m).into_owned(), n, m);
    (x, psi, u)
}

/// Builds the distinct-position shadows of a converged triple.
fn make_shadows(
    x: &RandomVector,
    psi: &RandomVector,
    u: &RandomVector,
) -> Result<(EmpiricalMeasure, EmpiricalMeasure, MultiplierMap)> {
    let nu_bar = RandomVector::concat(&[x, psi]).law()?;
    let bnu_bar = RandomVector::concat(&[x, psi, u]).law()?;
    let lambda_bar = barycentric_projection(&nu_bar, GROUP_TOL)?;
    Ok((nu_bar, bnu_bar, lambda_bar))
}

/// Damped Newton iteration on the Hamiltonian gradient, using the block
/// Hessian as Jacobian with Armijo backtracking on the residual norm.
pub fn solve_stationary(
    model: &dyn ControlProblem,
    x0: &RandomVector,
    psi0: &RandomVector,
    u0: &RandomVector,
    opts: &NewtonOptions,
) -> Result<StationaryTriple> {
    assert!(opts.max_iter >= 1 && opts.tol > 0.0);
    let (n, d, m) = (x0.len(), model.state_dim(), model.control_dim());
    let scale = 1.0 / (n as f64).sqrt();

    let mut z = stack(x0, psi0, u0);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::EvaluatorFailure {
            name: "solve_stationary",
            detail: "non-finite initial guess".into(),
        });
    }

    let residual_of = |z: &DVector<f64>| -> Result<(DVector<f64>, f64)> {
        let (x, psi, u) = unstack(z, n, d, m);
        let (gx, gp, gu) = hamiltonian_gradient(model, &x, &psi, &u)?;
        let f = stack(&gx, &gp, &gu);
        let norm = f.norm() * scale;
        Ok((f, norm))
    };

    let (mut f, mut norm) = residual_of(&z)?;
    let mut trace = vec![norm];
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        if norm <= opts.tol {
            break;
        }
        iterations += 1;
        let (x, psi, u) = unstack(&z, n, d, m);
        let jac = assemble_block_hessian(model, &x, &psi, &u)?.assembled();
        let cond = condition_number(&jac);
        if !cond.is_finite() || cond > opts.cond_cap {
            return Err(Error::DegenerateJacobian {
                cond,
                cap: opts.cond_cap,
            });
        }
        let delta = jac.lu().solve(&(-&f)).ok_or(Error::DegenerateJacobian {
            cond,
            cap: opts.cond_cap,
        })?;

        // Armijo backtracking with halving.
        let mut step = 1.0;
        loop {
            let candidate = &z + &delta * step;
            match residual_of(&candidate) {
                Ok((fc, nc)) if nc <= (1.0 - 1e-4 * step) * norm => {
                    z = candidate;
                    f = fc;
                    norm = nc;
                    break;
                }
                _ => {
                    step *= 0.5;
                    if step < opts.min_step {
                        // Accept the full step as a last resort; the outer
                        // loop will flag nonconvergence if it stalls.
                        let candidate = &z + &delta;
                        let (fc, nc) = residual_of(&candidate)?;
                        z = candidate;
                        f = fc;
                        norm = nc;
                        break;
                    }
                }
            }
        }
        trace.push(norm);
    }

    if norm > opts.tol {
        return Err(Error::NonConvergence {
            solver: "stationary Newton",
            residual: norm,
            iterations,
        });
    }

    let (x, psi, u) = unstack(&z, n, d, m);
    let mu = x.law()?;
    let mut constraint_inf = 0.0_f64;
    for i in 0..n {
        constraint_inf =
            constraint_inf.max(model.velocity(&mu, &x.atom(i), &u.atom(i)).norm());
    }
    let (nu_bar, bnu_bar, lambda_bar) = make_shadows(&x, &psi, &u)?;
    Ok(StationaryTriple {
        x,
        psi,
        u,
        residual_norm: norm,
        constraint_inf,
        iterations,
        residual_trace: trace,
        nu_bar,
        bnu_bar,
        lambda_bar,
    })
}

/// Differential of the lifted constraint map at `(x, u)`, as a dense
/// matrix from the `(state, control)` lift to the state lift, split into
/// its pointwise (block-diagonal) part and its `1/N`-weighted kernel part.
#[derive(Debug, Clone)]
pub struct ConstraintDifferential {
    pub mult: DMatrix<f64>,
    pub kernel: DMatrix<f64>,
    n: usize,
    d: usize,
    m: usize,
}

impl ConstraintDifferential {
    pub fn full(&self) -> DMatrix<f64> {
        &self.mult + &self.kernel
    }

    /// Applies the differential to a stacked `[X-block | u-block]` flat
    /// direction.
    pub fn apply(&self, dx: &RandomVector, du: &RandomVector) -> RandomVector {
        let mut dir = DVector::zeros(self.n * (self.d + self.m));
        dir.rows_mut(0, self.n * self.d).copy_from(&dx.flatten());
        dir.rows_mut(self.n * self.d, self.n * self.m)
            .copy_from(&du.flatten());
        RandomVector::from_flat(&(self.full() * dir), self.n, self.d)
    }
}

pub fn constraint_differential(
    model: &dyn ControlProblem,
    x: &RandomVector,
    u: &RandomVector,
) -> Result<ConstraintDifferential> {
    let (n, d, m) = (x.len(), model.state_dim(), model.control_dim());
    let mu = x.law()?;
    let w = 1.0 / n as f64;
    let mut mult = DMatrix::zeros(n * d, n * (d + m));
    let mut kernel = DMatrix::zeros(n * d, n * (d + m));
    let u_off = n * d;
    for i in 0..n {
        let (xi, ui) = (x.atom(i), u.atom(i));
        mult.view_mut((i * d, i * d), (d, d))
            .copy_from(&model.dv_x(&mu, &xi, &ui));
        mult.view_mut((i * d, u_off + i * m), (d, m))
            .copy_from(&model.dv_u(&mu, &xi, &ui));
        for j in 0..n {
            kernel
                .view_mut((i * d, j * d), (d, d))
                .copy_from(&(model.dv_mu(&mu, &xi, &ui, &x.atom(j)) * w));
        }
    }
    Ok(ConstraintDifferential {
        mult,
        kernel,
        n,
        d,
        m,
    })
}

/// Quantitative surjectivity diagnostics for the constraint differential:
/// the pointwise lower bound (worst smallest singular value of the
/// per-particle Jacobian) and the smallest singular value of the full
/// differential. Diagnostics never fail; thresholds are caller knobs.
#[derive(Debug, Clone, Serialize)]
pub struct SurjectivityReport {
    pub pointwise_bound: f64,
    pub full_sigma_min: f64,
    pub pointwise_pass: bool,
    pub full_pass: bool,
    pub pointwise_threshold: f64,
    pub full_threshold: f64,
}

pub fn surjectivity_diagnostics(
    model: &dyn ControlProblem,
    x: &RandomVector,
    u: &RandomVector,
    pointwise_threshold: f64,
    full_threshold: f64,
) -> Result<SurjectivityReport> {
    let (n, d, m) = (x.len(), model.state_dim(), model.control_dim());
    let mu = x.law()?;
    let mut pointwise = f64::INFINITY;
    for i in 0..n {
        let (xi, ui) = (x.atom(i), u.atom(i));
        let mut jac = DMatrix::zeros(d, d + m);
        jac.view_mut((0, 0), (d, d))
            .copy_from(&model.dv_x(&mu, &xi, &ui));
        jac.view_mut((0, d), (d, m))
            .copy_from(&model.dv_u(&mu, &xi, &ui));
        pointwise = pointwise.min(sigma_min(&jac));
    }
    let full = constraint_differential(model, x, u)?.full();
    let full_sigma = sigma_min(&full);
    Ok(SurjectivityReport {
        pointwise_bound: pointwise,
        full_sigma_min: full_sigma,
        pointwise_pass: pointwise > pointwise_threshold,
        full_pass: full_sigma > full_threshold,
        pointwise_threshold,
        full_threshold,
    })
}

/// Static cost of a particle configuration: `(1/N) sum_i L(mu, x_i, u_i)`.
pub fn lagrangian_static_cost(
    model: &dyn ControlProblem,
    x: &RandomVector,
    u: &RandomVector,
) -> Result<f64> {
    let mu = x.law()?;
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += model.running_cost(&mu, &x.atom(i), &u.atom(i));
    }
    Ok(acc / x.len() as f64)
}

/// Static cost of a distinct-position configuration with group weights.
pub fn eulerian_static_cost(
    model: &dyn ControlProblem,
    mu: &EmpiricalMeasure,
    structure: &GroupStructure,
    controls: &[DVector<f64>],
) -> f64 {
    let mut acc = 0.0;
    for (g, members) in structure.groups.iter().enumerate() {
        let xg = mu.point(members[0]);
        acc += structure.weight(g) * model.running_cost(mu, &xg, &controls[g]);
    }
    acc
}

/// Realizes a distinct-position pair as a particle pair: the state lists
/// the atoms and the control is composed through the position groups.
/// Costs match exactly.
pub fn transfer_eulerian_to_lagrangian(
    mu: &EmpiricalMeasure,
    controls: &[DVector<f64>],
    tol: f64,
) -> Result<(RandomVector, RandomVector)> {
    let x = RandomVector::from_measure(mu);
    let structure = GroupStructure::from_vector(&x, tol);
    if controls.len() != structure.group_count() {
        return Err(Error::MissingGroupControl {
            group: controls.len().min(structure.group_count()),
        });
    }
    let m = controls[0].len();
    let mut u = RandomVector::zeros(mu.len(), m);
    for (g, members) in structure.groups.iter().enumerate() {
        for &i in members {
            u.set_atom(i, &controls[g]);
        }
    }
    Ok((x, u))
}

/// Result of averaging a particle control onto distinct positions.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub mu: EmpiricalMeasure,
    pub structure: GroupStructure,
    pub controls: Vec<DVector<f64>>,
    pub lagrangian_cost: f64,
    pub eulerian_cost: f64,
}

/// Averages the control over position groups, re-checks feasibility of
/// the averaged control (which relies on control affinity), and reports
/// both costs; the averaged cost never exceeds the particle cost for a
/// control-convex running cost.
pub fn transfer_lagrangian_to_eulerian(
    model: &dyn ControlProblem,
    x: &RandomVector,
    u: &RandomVector,
    tol: f64,
) -> Result<TransferReport> {
    let mu = x.law()?;
    // Feasibility of the incoming pair.
    let mut defect = 0.0_f64;
    for i in 0..x.len() {
        defect = defect.max(model.velocity(&mu, &x.atom(i), &u.atom(i)).norm());
    }
    if defect > tol {
        return Err(Error::Infeasible {
            detail: format!("incoming pair violates the constraint by {defect:.3e}"),
        });
    }
    let structure = GroupStructure::from_vector(x, GROUP_TOL);
    let mut controls = Vec::with_capacity(structure.group_count());
    for members in &structure.groups {
        let mut mean = DVector::zeros(u.dim());
        for &i in members {
            mean += u.atom(i);
        }
        controls.push(mean / members.len() as f64);
    }
    // Feasibility of the averaged control.
    let mut avg_defect = 0.0_f64;
    for (g, members) in structure.groups.iter().enumerate() {
        let xg = x.atom(members[0]);
        avg_defect = avg_defect.max(model.velocity(&mu, &xg, &controls[g]).norm());
    }
    if avg_defect > tol {
        return Err(Error::AffinityViolation {
            defect: avg_defect,
            tol,
        });
    }
    let lagrangian_cost = lagrangian_static_cost(model, x, u)?;
    let eulerian_cost = eulerian_static_cost(model, &mu, &structure, &controls);
    Ok(TransferReport {
        mu,
        structure,
        controls,
        lagrangian_cost,
        eulerian_cost,
    })
}

/// Intrinsic optimality residuals at a stationary triple, all in the
/// appropriate weighted L2 norms.
#[derive(Debug, Clone, Serialize)]
pub struct EulerianKktResidual {
    /// Multiplier form: stationarity of the cost against the adjoint of
    /// the intrinsic constraint differential, using the barycentric
    /// multiplier on position groups.
    pub multiplier_form: f64,
    /// State-costate form: the weak stationarity integrand aggregated
    /// over distinct state-costate atoms (coordinate indicator tests).
    pub state_costate_form: f64,
    /// Hamiltonian form: norm of the relaxed-Hamiltonian gradient over
    /// the state-costate-control ensemble (includes the feasibility row).
    pub hamiltonian_form: f64,
}

/// Evaluates the three intrinsic residual forms at a stationary triple.
pub fn eulerian_kkt_residual(
    model: &dyn ControlProblem,
    triple: &StationaryTriple,
) -> Result<EulerianKktResidual> {
    let x = &triple.x;
    let psi = &triple.psi;
    let n = x.len();
    let w = 1.0 / n as f64;
    let mu = x.law()?;
    let (d, m) = (model.state_dim(), model.control_dim());

    // Position groups and the group-averaged control.
    let structure = GroupStructure::from_vector(x, GROUP_TOL);
    let mut u_groups: Vec<DVector<f64>> = Vec::with_capacity(structure.group_count());
    for members in &structure.groups {
        let mut mean = DVector::zeros(m);
        for &i in members {
            mean += triple.u.atom(i);
        }
        u_groups.push(mean / members.len() as f64);
    }
    let u_at = |atom: usize| -> &DVector<f64> { &u_groups[structure.atom_group[atom]] };

    // Shared kernel sums over the ensemble.
    let kernel_x = |probe: &DVector<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(d);
        for j in 0..n {
            let (xj, pj) = (x.atom(j), psi.atom(j));
            acc += (model.dv_mu(&mu, &xj, u_at(j), probe).transpose() * pj
                - model.dl_mu(&mu, &xj, u_at(j), probe))
                * w;
        }
        acc
    };
    let cost_kernel = |probe: &DVector<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(d);
        for j in 0..n {
            acc += model.dl_mu(&mu, &x.atom(j), u_at(j), probe) * w;
        }
        acc
    };

    // Multiplier form on position groups with the barycentric multiplier.
    let mut multiplier_sq = 0.0;
    for (g, members) in structure.groups.iter().enumerate() {
        let xg = x.atom(members[0]);
        let ug = &u_groups[g];
        let lam = &triple.lambda_bar.values[triple.lambda_bar.atom_group[members[0]]];
        // Gradient of the relaxed cost in the (x, u) slots.
        let grad_x_cost = model.dl_x(&mu, &xg, ug) + cost_kernel(&xg);
        let grad_u_cost = model.dl_u(&mu, &xg, ug);
        // Adjoint of the intrinsic constraint differential applied to the
        // multiplier field.
        let mut adj_x = model.dv_x(&mu, &xg, ug).transpose() * lam;
        for (h, other) in structure.groups.iter().enumerate() {
            let xh = x.atom(other[0]);
            let lam_h = &triple.lambda_bar.values[triple.lambda_bar.atom_group[other[0]]];
            adj_x += (model.dv_mu(&mu, &xh, &u_groups[h], &xg).transpose() * lam_h)
                * structure.weight(h);
        }
        let adj_u = model.dv_u(&mu, &xg, ug).transpose() * lam;
        let rx = grad_x_cost - adj_x;
        let ru = grad_u_cost - adj_u;
        multiplier_sq += structure.weight(g) * (rx.norm_squared() + ru.norm_squared());
    }

    // State-costate form on distinct (x, psi) atoms.
    let nu_structure = GroupStructure::from_vector(&RandomVector::concat(&[x, psi]), GROUP_TOL);
    let mut state_costate_sq = 0.0;
    for members in &nu_structure.groups {
        let atom = members[0];
        let (xa, pa) = (x.atom(atom), psi.atom(atom));
        let ua = u_at(atom);
        let grad_x_cost = model.dl_x(&mu, &xa, ua) + cost_kernel(&xa);
        let grad_u_cost = model.dl_u(&mu, &xa, ua);
        let mut kernel_adj = DVector::zeros(d);
        for j in 0..n {
            kernel_adj +=
                (model.dv_mu(&mu, &x.atom(j), u_at(j), &xa).transpose() * psi.atom(j)) * w;
        }
        let rx = grad_x_cost - model.dv_x(&mu, &xa, ua).transpose() * &pa - kernel_adj;
        let ru = grad_u_cost - model.dv_u(&mu, &xa, ua).transpose() * &pa;
        let weight = members.len() as f64 / n as f64;
        state_costate_sq += weight * (rx.norm_squared() + ru.norm_squared());
    }

    // Hamiltonian form over the full ensemble, with the group-averaged
    // control composed back through the states.
    let mut hamiltonian_sq = 0.0;
    for i in 0..n {
        let (xi, pi) = (x.atom(i), psi.atom(i));
        let ui = u_at(i);
        let gx = model.dv_x(&mu, &xi, ui).transpose() * &pi - model.dl_x(&mu, &xi, ui)
            + kernel_x(&xi);
        let gp = model.velocity(&mu, &xi, ui);
        let gu = model.dv_u(&mu, &xi, ui).transpose() * &pi - model.dl_u(&mu, &xi, ui);
        hamiltonian_sq += w * (gx.norm_squared() + gp.norm_squared() + gu.norm_squared());
    }

    Ok(EulerianKktResidual {
        multiplier_form: multiplier_sq.sqrt(),
        state_costate_form: state_costate_sq.sqrt(),
        hamiltonian_form: hamiltonian_sq.sqrt(),
    })
}
