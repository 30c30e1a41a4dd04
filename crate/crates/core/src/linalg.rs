//! Small dense linear-algebra helpers shared by the solver modules.
//!
//! The real Schur decomposition is implemented here directly (Hessenberg
//! reduction plus Francis double-shift QR with exceptional shifts); the
//! mean-field ensembles produce matrices with N-fold repeated eigenvalues
//! on which generic QR iterations without shift restarts stall.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values with a bounded iteration count and a symmetric
/// eigenvalue fallback for the rare non-converged case.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    if let Some(svd) = m.clone().try_svd(false, false, 1e-14, 200_000) {
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        return sv;
    }
    // Fallback through the normal matrix.
    let gram = symmetrize(&(m.transpose() * m));
    let eig = gram.symmetric_eigen();
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest singular value.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Smallest singular value of a complex matrix through its real
/// embedding `[[Re, -Im], [Im, Re]]`, which has the same singular values
/// with doubled multiplicities.
pub fn sigma_min_complex(m: &DMatrix<Complex<f64>>) -> f64 {
    let (p, q) = m.shape();
    let mut emb = DMatrix::zeros(2 * p, 2 * q);
    for i in 0..p {
        for j in 0..q {
            let z = m[(i, j)];
            emb[(i, j)] = z.re;
            emb[(i, q + j)] = -z.im;
            emb[(p + i, j)] = z.im;
            emb[(p + i, q + j)] = z.re;
        }
    }
    sigma_min(&emb)
}

/// 2-norm condition number.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&max), Some(&min)) if min > 0.0 => max / min,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 0.0,
    }
}

/// Inverse through LU with an explicit error on singular input.
pub fn invert(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::Assembly {
        detail: format!("singular matrix in {context}"),
    })
}

/// log |det M| summed over the diagonal of the LU factor; avoids overflow
/// for moderately large matrices.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows().min(u.ncols()) {
        acc += u[(i, i)].abs().max(f64::MIN_POSITIVE).ln();
    }
    acc
}

/// Symmetrize: `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Factor a symmetric positive-semidefinite matrix as `Q = C^T C` with
/// `C = Lambda^{1/2} V^T`. Eigenvalues in `[-clamp_tol, 0)` are clamped
/// to zero. Returns the factor and the smallest (unclamped) eigenvalue.
pub fn psd_factor(q: &DMatrix<f64>, clamp_tol: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = q.nrows();
    let eig = symmetrize(q).symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig < -clamp_tol {
        return Err(Error::HypothesisFailure {
            check: "psd_factor",
            detail: format!("matrix is indefinite: min eigenvalue {min_eig:.3e}"),
        });
    }
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i].max(0.0);
        let row = eig.eigenvectors.column(i).transpose() * lam.sqrt();
        c.set_row(i, &row);
    }
    Ok((c, min_eig))
}

/// Operator 2-norm of a symmetric matrix by power iteration on `M^2`
/// (capped at `max_iter` iterations or `rel_tol` relative change).
pub fn power_iteration_norm(m: &DMatrix<f64>, max_iter: usize, rel_tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start vector with nonzero overlap with every eigenspace.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut prev = 0.0;
    for _ in 0..max_iter {
        let w = m * (m * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let est = norm.sqrt();
        v = w / norm;
        if (est - prev).abs() <= rel_tol * est.max(1e-300) {
            return est;
        }
        prev = est;
    }
    prev
}

/// Real matrix promoted to complex entries.
pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Complex::new(m[(i, j)], 0.0))
}

// ---------------------------------------------------------------------
// Real Schur decomposition.
// ---------------------------------------------------------------------

/// Householder reflector annihilating all but the first entry of `x`;
/// returns the normalized direction, or `None` if `x` is already reduced.
fn householder(x: &[f64]) -> Option<Vec<f64>> {
    let norm_tail: f64 = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_tail == 0.0 {
        return None;
    }
    let alpha = -x[0].signum() * (x[0] * x[0] + norm_tail * norm_tail).sqrt();
    let mut v: Vec<f64> = x.to_vec();
    v[0] -= alpha;
    let norm_v: f64 = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm_v == 0.0 {
        return None;
    }
    for e in &mut v {
        *e /= norm_v;
    }
    Some(v)
}

/// Applies `I - 2 v v^T` to rows `r0..r0+v.len()` of `m`.
fn reflect_rows(m: &mut DMatrix<f64>, v: &[f64], r0: usize, col_lo: usize) {
    let k = v.len();
    for j in col_lo..m.ncols() {
        let mut dot = 0.0;
        for (s, vs) in v.iter().enumerate() {
            dot += vs * m[(r0 + s, j)];
        }
        let dot = 2.0 * dot;
        for (s, vs) in v.iter().enumerate() {
            m[(r0 + s, j)] -= dot * vs;
        }
    }
    let _ = k;
}

/// Applies `I - 2 v v^T` to columns `c0..c0+v.len()` of `m`.
fn reflect_cols(m: &mut DMatrix<f64>, v: &[f64], c0: usize, row_hi: usize) {
    for i in 0..row_hi {
        let mut dot = 0.0;
        for (s, vs) in v.iter().enumerate() {
            dot += vs * m[(i, c0 + s)];
        }
        let dot = 2.0 * dot;
        for (s, vs) in v.iter().enumerate() {
            m[(i, c0 + s)] -= dot * vs;
        }
    }
}

/// Reduces `h` to upper Hessenberg form, accumulating the transform in `q`.
fn hessenberg(h: &mut DMatrix<f64>, q: &mut DMatrix<f64>) {
    let n = h.nrows();
    for j in 0..n.saturating_sub(2) {
        let col: Vec<f64> = (j + 1..n).map(|i| h[(i, j)]).collect();
        if let Some(v) = householder(&col) {
            reflect_rows(h, &v, j + 1, 0);
            reflect_cols(h, &v, j + 1, n);
            reflect_cols(q, &v, j + 1, n);
        }
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }
}

/// Applies a plane rotation `G = [[c, s], [-s, c]]` as a similarity on
/// rows/columns `(i, i+1)`, accumulating into `q`.
fn apply_rotation(h: &mut DMatrix<f64>, q: &mut DMatrix<f64>, i: usize, c: f64, s: f64) {
    let n = h.ncols();
    for j in 0..n {
        let (a, b) = (h[(i, j)], h[(i + 1, j)]);
        h[(i, j)] = c * a + s * b;
        h[(i + 1, j)] = -s * a + c * b;
    }
    for r in 0..n {
        let (a, b) = (h[(r, i)], h[(r, i + 1)]);
        h[(r, i)] = c * a + s * b;
        h[(r, i + 1)] = -s * a + c * b;
        let (a, b) = (q[(r, i)], q[(r, i + 1)]);
        q[(r, i)] = c * a + s * b;
        q[(r, i + 1)] = -s * a + c * b;
    }
}

/// Rotates a converged 2x2 diagonal block with real eigenvalues into
/// upper-triangular form (complex pairs are left untouched).
fn split_real_block(h: &mut DMatrix<f64>, q: &mut DMatrix<f64>, i: usize) {
    let (a, b) = (h[(i, i)], h[(i, i + 1)]);
    let (c, d) = (h[(i + 1, i)], h[(i + 1, i + 1)]);
    if c == 0.0 {
        return;
    }
    let half = 0.5 * (a - d);
    let disc = half * half + b * c;
    if disc < 0.0 {
        return;
    }
    let root = disc.sqrt();
    let lam = 0.5 * (a + d) + if half >= 0.0 { root } else { -root };
    // Eigenvector of the block for lam, chosen from the better row.
    let (mut vx, mut vy) = (b, lam - a);
    if vx.abs() + vy.abs() < 1e-300 || (lam - d).abs() + c.abs() > vx.abs() + vy.abs() {
        vx = lam - d;
        vy = c;
    }
    let norm = (vx * vx + vy * vy).sqrt();
    if norm == 0.0 {
        return;
    }
    apply_rotation(h, q, i, vx / norm, vy / norm);
    h[(i + 1, i)] = 0.0;
}

/// Real Schur decomposition `A = Q T Q^T` with `T` quasi-upper-triangular,
/// Francis double-shift QR with exceptional shifts every ten stalled
/// sweeps.
pub fn real_schur(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "real_schur needs a square matrix");
    let mut h = a.clone();
    let mut q = DMatrix::identity(n, n);
    if n <= 1 {
        return Ok((q, h));
    }
    hessenberg(&mut h, &mut q);

    // Deflation threshold with a dimension-aware noise floor: full-row
    // reflector updates leave O(sqrt(n)) ulps on converged subdiagonals.
    let eps = (4.0 + (n as f64).sqrt()) * f64::EPSILON;
    let norm_scale = h.amax().max(f64::MIN_POSITIVE);
    let mut hi = n - 1;
    let mut stalled = 0usize;
    let mut budget = 60 * n.max(4);

    while hi > 0 {
        // Deflation scan: find the top of the unreduced block ending at hi.
        let mut lo = 0;
        for i in (1..=hi).rev() {
            let s = h[(i - 1, i - 1)].abs() + h[(i, i)].abs();
            let s = if s == 0.0 { norm_scale } else { s };
            if h[(i, i - 1)].abs() <= eps * s {
                h[(i, i - 1)] = 0.0;
                lo = i;
                break;
            }
        }

        if lo == hi {
            hi -= 1;
            stalled = 0;
            continue;
        }
        if lo + 1 == hi {
            split_real_block(&mut h, &mut q, lo);
            if lo == 0 {
                break;
            }
            hi = lo - 1;
            stalled = 0;
            continue;
        }

        if budget == 0 {
            return Err(Error::NonConvergence {
                solver: "real Schur QR iteration",
                residual: h[(hi, hi - 1)].abs(),
                iterations: 60 * n,
            });
        }
        budget -= 1;
        stalled += 1;

        // Double-shift data from the trailing 2x2 block, replaced by the
        // ad hoc exceptional surrogate on stalled sweeps.
        let (sum, prod) = if stalled % 10 == 0 {
            let w = h[(hi, hi - 1)].abs()
                + if hi >= 2 { h[(hi - 1, hi - 2)].abs() } else { 0.0 };
            let h11 = 0.75 * w + h[(hi, hi)];
            (2.0 * h11, h11 * h11 + 0.4375 * w * w)
        } else {
            let (h11, h12) = (h[(hi - 1, hi - 1)], h[(hi - 1, hi)]);
            let (h21, h22) = (h[(hi, hi - 1)], h[(hi, hi)]);
            (h11 + h22, h11 * h22 - h12 * h21)
        };

        // First column of the shift polynomial at the top of the block.
        let mut x = h[(lo, lo)] * h[(lo, lo)] + h[(lo, lo + 1)] * h[(lo + 1, lo)]
            - sum * h[(lo, lo)]
            + prod;
        let mut y = h[(lo + 1, lo)] * (h[(lo, lo)] + h[(lo + 1, lo + 1)] - sum);
        let mut z = if lo + 2 <= hi {
            h[(lo + 1, lo)] * h[(lo + 2, lo + 1)]
        } else {
            0.0
        };

        for k in lo..hi - 1 {
            let scale = x.abs().max(y.abs()).max(z.abs());
            let vec = if scale > 0.0 {
                vec![x / scale, y / scale, z / scale]
            } else {
                vec![1.0, 0.0, 0.0]
            };
            if let Some(v) = householder(&vec) {
                reflect_rows(&mut h, &v, k, 0);
                reflect_cols(&mut h, &v, k, n);
                reflect_cols(&mut q, &v, k, n);
            }
            if k > lo {
                h[(k + 1, k - 1)] = 0.0;
                h[(k + 2, k - 1)] = 0.0;
            }
            x = h[(k + 1, k)];
            y = h[(k + 2, k)];
            z = if k + 3 <= hi { h[(k + 3, k)] } else { 0.0 };
        }

        // Final two-row reflector.
        let scale = x.abs().max(y.abs());
        if scale > 0.0 {
            if let Some(v) = householder(&[x / scale, y / scale]) {
                reflect_rows(&mut h, &v, hi - 1, 0);
                reflect_cols(&mut h, &v, hi - 1, n);
                reflect_cols(&mut q, &v, hi - 1, n);
            }
        }
        if hi >= 2 {
            h[(hi, hi - 2)] = 0.0;
        }
    }
    // Final sweep: split any remaining real 2x2 blocks and clear dust
    // below the first subdiagonal.
    let mut i = 0;
    while i + 1 < n {
        if h[(i + 1, i)] != 0.0 {
            split_real_block(&mut h, &mut q, i);
            i += 2;
        } else {
            i += 1;
        }
    }
    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }
    Ok((q, h))
}

/// Eigenvalues read off a real quasi-upper-triangular matrix.
pub fn eigenvalues_from_schur(t: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = t.nrows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (a, b) = (t[(i, i)], t[(i, i + 1)]);
            let (c, d) = (t[(i + 1, i)], t[(i + 1, i + 1)]);
            let mean = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc < 0.0 {
                let imag = (-disc).sqrt();
                out.push(Complex::new(mean, imag));
                out.push(Complex::new(mean, -imag));
            } else {
                let root = disc.sqrt();
                out.push(Complex::new(mean + root, 0.0));
                out.push(Complex::new(mean - root, 0.0));
            }
            i += 2;
        } else {
            out.push(Complex::new(t[(i, i)], 0.0));
            i += 1;
        }
    }
    out
}

/// Full spectrum through the real Schur form.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let (_, t) = real_schur(a)?;
    Ok(eigenvalues_from_schur(&t))
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .fold(f64::NEG_INFINITY, |a, ev| a.max(ev.re)))
}
