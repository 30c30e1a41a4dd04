//! Dense algebraic Riccati and Lyapunov solvers.
//!
//! The Riccati solve extracts the stable invariant subspace of the
//! associated Hamiltonian matrix through the matrix sign function (with
//! determinant scaling), then polishes with Newton-Kleinman iterations;
//! each polish step is a Bartels-Stewart Lyapunov solve on the real Schur
//! form.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{log_abs_det, spectral_abscissa, symmetrize};
use crate::tolerances::MATRIX_EQUATION_TOL;

/// Solves the small Sylvester system `A X + X B = C` by Kronecker
/// linearization; intended for the 1x1 and 2x2 diagonal blocks of a real
/// Schur form.
fn solve_sylvester_small(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.nrows());
    let k = DMatrix::identity(m, m).kronecker(a) + b.transpose().kronecker(&DMatrix::identity(n, n));
    let rhs = DMatrix::from_fn(n * m, 1, |idx, _| c[(idx % n, idx / n)]);
    let sol = k.lu().solve(&rhs).ok_or(Error::Assembly {
        detail: "singular Sylvester block (eigenvalue collision)".into(),
    })?;
    Ok(DMatrix::from_fn(n, m, |i, j| sol[(j * n + i, 0)]))
}

/// Diagonal block partition of a real quasi-upper-triangular matrix.
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let tol = 1e-13 * t.amax().max(1.0);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > tol {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

fn schur_decompose(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    crate::linalg::real_schur(a)
}

/// Solves the quasi-triangular Lyapunov system `S Y + Y S^T = C`.
fn solve_triangular_lyapunov(s: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let blocks = schur_blocks(s);
    let p = blocks.len();
    let n = s.nrows();
    let mut y = DMatrix::zeros(n, n);
    for jb in (0..p).rev() {
        let (j0, sj) = blocks[jb];
        for ib in (0..p).rev() {
            let (i0, si) = blocks[ib];
            let mut rhs = c.view((i0, j0), (si, sj)).into_owned();
            // Contributions of already-solved blocks to (S Y)_IJ.
            for kb in (ib + 1)..p {
                let (k0, sk) = blocks[kb];
                rhs -= s.view((i0, k0), (si, sk)) * y.view((k0, j0), (sk, sj));
            }
            // Contributions of already-solved blocks to (Y S^T)_IJ.
            for kb in (jb + 1)..p {
                let (k0, sk) = blocks[kb];
                rhs -= y.view((i0, k0), (si, sk)) * s.view((j0, k0), (sj, sk)).transpose();
            }
            let sii = s.view((i0, i0), (si, si)).into_owned();
            let sjj_t = s.view((j0, j0), (sj, sj)).transpose().into_owned();
            let block = solve_sylvester_small(&sii, &sjj_t, &rhs)?;
            y.view_mut((i0, j0), (si, sj)).copy_from(&block);
        }
    }
    Ok(y)
}

/// Residual of `A E + E A^T + W`.
pub fn lyapunov_residual(a: &DMatrix<f64>, e: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (a * e + e * a.transpose() + w).norm()
}

/// Solves the continuous Lyapunov equation `A E + E A^T + W = 0` for a
/// stable `A` by Bartels-Stewart on the real Schur form, with two passes
/// of iterative refinement.
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let abscissa = spectral_abscissa(a)?;
    if abscissa >= 0.0 {
        return Err(Error::UnstableMatrix { abscissa });
    }
    let (q, t) = schur_decompose(a)?;
    let mut e = DMatrix::zeros(a.nrows(), a.ncols());
    for _ in 0..3 {
        let defect = -(a * &e + &e * a.transpose() + w);
        if defect.norm() <= 1e-15 * w.norm().max(1.0) {
            break;
        }
        let c = q.transpose() * &defect * &q;
        let y = solve_triangular_lyapunov(&t, &c)?;
        e += &q * y * q.transpose();
    }
    let residual = lyapunov_residual(a, &e, w);
    let tol = MATRIX_EQUATION_TOL * w.norm().max(1.0);
    if residual > tol {
        return Err(Error::ResidualTooLarge {
            equation: "Lyapunov",
            residual,
            tol,
        });
    }
    Ok(e)
}

/// Residual of the Riccati equation
/// `A^T P + P A + C^T C + P G P` with `G = b_eff r_inv b_eff^T`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    (a.transpose() * p + p * a + q + p * g * p).norm()
}

/// Solves the algebraic Riccati equation
///
/// `A^T P + P A + C^T C + P (b_eff r_inv b_eff^T) P = 0`
///
/// for the stabilizing symmetric positive-semidefinite solution. The
/// weight `r_inv` is the (negative-definite) inverse control curvature,
/// so `G = b_eff r_inv b_eff^T` is negative semidefinite and `A + G P`
/// is the stable closed-loop matrix.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b_eff: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let g = symmetrize(&(b_eff * r_inv * b_eff.transpose()));
    let q = symmetrize(&(c.transpose() * c));

    // Hamiltonian matrix [[A, G], [-Q, -A^T]] (G = -S in the standard
    // control convention).
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&g);
    ham.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    // Matrix sign iteration with determinant scaling.
    let mut z = ham.clone();
    let mut converged = false;
    for _ in 0..120 {
        let scale = (-log_abs_det(&z) / (2.0 * n as f64)).exp();
        let zs = &z * scale;
        let inv = zs.clone().try_inverse().ok_or(Error::RiccatiInfeasible {
            expected: n,
            found: 0,
        })?;
        let next = (&zs + &inv) * 0.5;
        let delta = (&next - &z).norm();
        let size = z.norm().max(1.0);
        z = next;
        if delta <= 1e-14 * size {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            solver: "matrix sign iteration",
            residual: (&z * &z - DMatrix::identity(2 * n, 2 * n)).norm(),
            iterations: 120,
        });
    }

    // Spectral projector onto the stable invariant subspace.
    let projector = (DMatrix::identity(2 * n, 2 * n) - &z) * 0.5;
    let svd = projector.svd(true, false);
    let rank = svd.singular_values.iter().filter(|&&s| s > 0.5).count();
    if rank != n {
        return Err(Error::RiccatiInfeasible {
            expected: n,
            found: rank,
        });
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let u1 = u.view((0, 0), (n, n)).into_owned();
    let u2 = u.view((n, 0), (n, n)).into_owned();
    // P = U2 U1^{-1}, computed through a transposed solve.
    let p_t = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or(Error::RiccatiInfeasible {
            expected: n,
            found: rank,
        })?;
    let mut p = symmetrize(&p_t.transpose());

    // Newton-Kleinman polish: each step solves a Lyapunov equation in the
    // closed-loop matrix of the current iterate.
    let mut residual = riccati_residual(a, &g, &q, &p);
    for _ in 0..25 {
        if residual <= 1e-13 * p.norm().max(1.0) {
            break;
        }
        let a_cl = a + &g * &p;
        if spectral_abscissa(&a_cl)? >= 0.0 {
            break;
        }
        // (A + G P)^T P' + P' (A + G P) + Q - P G P = 0.
        let w = symmetrize(&(&q - &p * &g * &p));
        let next = match solve_lyapunov(&a_cl.transpose(), &w) {
            Ok(sol) => symmetrize(&sol),
            Err(_) => break,
        };
        let next_residual = riccati_residual(a, &g, &q, &next);
        if next_residual >= residual {
            break;
        }
        p = next;
        residual = next_residual;
    }

    let tol = MATRIX_EQUATION_TOL * (q.norm() + p.norm()).max(1.0);
    if residual > tol {
        return Err(Error::ResidualTooLarge {
            equation: "Riccati",
            residual,
            tol,
        });
    }
    let closed_loop = a + &g * &p;
    let abscissa = spectral_abscissa(&closed_loop)?;
    if abscissa >= 0.0 {
        return Err(Error::UnstableMatrix { abscissa });
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati_closed_form() {
        // A = 1, b_eff = 1, r_inv = -1/2, C = sqrt(2):
        // 2P + 2 - P^2/2 = 0 with positive root P = 2 + 2 sqrt(2).
        let p = solve_riccati(&mat1(1.0), &mat1(1.0), &mat1(-0.5), &mat1(2.0_f64.sqrt())).unwrap();
        let expected = 2.0 + 2.0 * 2.0_f64.sqrt();
        assert!(
            (p[(0, 0)] - expected).abs() < 1e-12,
            "P = {}, expected {expected}",
            p[(0, 0)]
        );
        // Closed loop 1 - P/2 = -sqrt(2).
        let a_cl = 1.0 - 0.5 * p[(0, 0)];
        assert!((a_cl + 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_observation_with_stable_drift_gives_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let b = DMatrix::identity(2, 1);
        let r_inv = mat1(-1.0);
        let c = DMatrix::zeros(2, 2);
        let p = solve_riccati(&a, &b, &r_inv, &c).unwrap();
        assert!(p.norm() < 1e-10);
    }

    #[test]
    fn random_riccati_instances_have_small_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..10 {
            let n = rng.random_range(2..=5);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::identity(n, n);
            let r_inv = -DMatrix::identity(n, n);
            let c_raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            // Full-rank observation keeps detectability trivially true.
            let c = &c_raw + DMatrix::identity(n, n) * 2.0;
            let p = solve_riccati(&a, &b, &r_inv, &c).unwrap();
            let g = &b * &r_inv * b.transpose();
            let q = c.transpose() * &c;
            let res = riccati_residual(&a, &g, &q, &p);
            assert!(res < 1e-9, "trial {trial}: residual {res}");
            // Stabilizing and symmetric PSD.
            assert!(spectral_abscissa(&(&a + &g * &p)).unwrap() < 0.0);
            let eig = symmetrize(&p).symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l > -1e-9));
        }
    }

    #[test]
    fn scalar_lyapunov_closed_form() {
        // 2 (-sqrt(2)) E + (-1/2) = 0  =>  E = -1/(4 sqrt(2)).
        let a = mat1(-(2.0_f64.sqrt()));
        let w = mat1(-0.5);
        let e = solve_lyapunov(&a, &w).unwrap();
        let expected = -1.0 / (4.0 * 2.0_f64.sqrt());
        assert!((e[(0, 0)] - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -3.0]);
        let e = solve_lyapunov(&a, &DMatrix::zeros(2, 2)).unwrap();
        assert!(e.norm() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_matrix() {
        let a = mat1(0.5);
        assert!(matches!(
            solve_lyapunov(&a, &mat1(1.0)),
            Err(Error::UnstableMatrix { .. })
        ));
    }

    #[test]
    fn random_stable_lyapunov_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let n = rng.random_range(2..=6);
            let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            // Shift to guarantee stability.
            let a = &raw - DMatrix::identity(n, n) * (spectral_abscissa(&raw).unwrap() + 0.5);
            let w_raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let w = symmetrize(&w_raw);
            let e = solve_lyapunov(&a, &w).unwrap();
            assert!(lyapunov_residual(&a, &e, &w) < 1e-11);
            // Symmetric data gives a symmetric solution.
            assert!((&e - e.transpose()).norm() < 1e-10);
        }
    }

    #[test]
    fn complex_pair_blocks_are_handled() {
        // Spiral with complex spectrum -1 +/- 2i.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0]);
        let w = DMatrix::identity(2, 2);
        let e = solve_lyapunov(&a, &w).unwrap();
        assert!(lyapunov_residual(&a, &e, &w) < 1e-12);
    }
}
