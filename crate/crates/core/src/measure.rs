//! Empirical measures on equally weighted particle sets, exact
//! Wasserstein-2 distances, transport plans and position-group utilities.

use nalgebra::{DMatrix, DVector};

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::tolerances::EXACT_OP_TOL;

/// Uniform empirical measure `(1/N) sum_i delta_{x_i}` stored as an N x k
/// matrix of particle coordinates (one particle per row).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: DMatrix<f64>,
    mean: DVector<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Dimension {
                context: "EmpiricalMeasure::new",
                expected: "N >= 1".into(),
                got: "N = 0".into(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluatorFailure {
                name: "EmpiricalMeasure::new",
                detail: "non-finite particle coordinate".into(),
            });
        }
        let mean = barycenter(&points);
        Ok(Self { points, mean })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Coordinates of particle `i` as a column vector.
    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    /// First moment `(1/N) sum_i x_i`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Second moment `(1/N) sum_i |x_i|^2`.
    pub fn second_moment(&self) -> f64 {
        self.points.norm_squared() / self.len() as f64
    }
}

fn barycenter(points: &DMatrix<f64>) -> DVector<f64> {
    let n = points.nrows() as f64;
    let mut mean = DVector::zeros(points.ncols());
    for i in 0..points.nrows() {
        mean += points.row(i).transpose();
    }
    mean / n
}

/// Coupling between two equal-size ensembles: a permutation (Monge form),
/// optionally a doubly stochastic matrix for non-Monge plans.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    permutation: Vec<usize>,
    matrix: Option<DMatrix<f64>>,
}

impl TransportPlan {
    pub fn from_permutation(permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &j in &permutation {
            if j >= n || seen[j] {
                return Err(Error::Dimension {
                    context: "TransportPlan::from_permutation",
                    expected: "a bijection of {0..N-1}".into(),
                    got: format!("{permutation:?}"),
                });
            }
            seen[j] = true;
        }
        Ok(Self {
            permutation,
            matrix: None,
        })
    }

    /// Doubly stochastic plan; entries are joint probabilities, so every
    /// row and column must sum to `1/N`.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() || n == 0 {
            return Err(Error::Dimension {
                context: "TransportPlan::from_matrix",
                expected: "square nonempty matrix".into(),
                got: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        let w = 1.0 / n as f64;
        for i in 0..n {
            let row_sum: f64 = matrix.row(i).iter().sum();
            let col_sum: f64 = matrix.column(i).iter().sum();
            if (row_sum - w).abs() > EXACT_OP_TOL || (col_sum - w).abs() > EXACT_OP_TOL {
                return Err(Error::Dimension {
                    context: "TransportPlan::from_matrix",
                    expected: format!("row/column sums {w}"),
                    got: format!("row {row_sum}, column {col_sum} at index {i}"),
                });
            }
        }
        // Greedy Monge representative used only for bookkeeping.
        let permutation = (0..n).collect();
        Ok(Self {
            permutation,
            matrix: Some(matrix),
        })
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        self.matrix.as_ref()
    }
}

fn check_same_shape(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.len() != nu.len() || mu.dim() != nu.dim() {
        return Err(Error::Dimension {
            context: "wasserstein2",
            expected: format!("{}x{}", mu.len(), mu.dim()),
            got: format!("{}x{}", nu.len(), nu.dim()),
        });
    }
    Ok(())
}

/// Exact Wasserstein-2 distance between equal-size uniform ensembles,
/// together with an optimal Monge plan.
///
/// Solved by sorting in dimension one and by optimal assignment on the
/// squared-distance matrix otherwise.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(f64, TransportPlan)> {
    check_same_shape(mu, nu)?;
    let n = mu.len();
    if mu.dim() == 1 {
        let mut left: Vec<usize> = (0..n).collect();
        let mut right: Vec<usize> = (0..n).collect();
        left.sort_by(|&a, &b| mu.points()[(a, 0)].total_cmp(&mu.points()[(b, 0)]));
        right.sort_by(|&a, &b| nu.points()[(a, 0)].total_cmp(&nu.points()[(b, 0)]));
        let mut perm = vec![0_usize; n];
        let mut cost = 0.0;
        for r in 0..n {
            let (i, j) = (left[r], right[r]);
            perm[i] = j;
            let d = mu.points()[(i, 0)] - nu.points()[(j, 0)];
            cost += d * d;
        }
        let dist = (cost / n as f64).sqrt();
        return Ok((dist, TransportPlan::from_permutation(perm)?));
    }

    let cost = DMatrix::from_fn(n, n, |i, j| {
        (mu.points().row(i) - nu.points().row(j)).norm_squared()
    });
    let (perm, total) = solve_assignment(&cost);
    let dist = (total.max(0.0) / n as f64).sqrt();
    Ok((dist, TransportPlan::from_permutation(perm)?))
}

/// Transport cost of a prescribed admissible plan; coincides with the
/// Wasserstein distance exactly when the plan is optimal.
pub fn weighted_wasserstein(
    plan: &TransportPlan,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64> {
    check_same_shape(mu, nu)?;
    if plan.len() != mu.len() {
        return Err(Error::Dimension {
            context: "weighted_wasserstein",
            expected: format!("plan of size {}", mu.len()),
            got: format!("plan of size {}", plan.len()),
        });
    }
    if let Some(gamma) = plan.matrix() {
        let mut cost = 0.0;
        for i in 0..mu.len() {
            for j in 0..nu.len() {
                cost += gamma[(i, j)] * (mu.points().row(i) - nu.points().row(j)).norm_squared();
            }
        }
        return Ok(cost.max(0.0).sqrt());
    }
    let n = mu.len() as f64;
    let cost: f64 = plan
        .permutation()
        .iter()
        .enumerate()
        .map(|(i, &j)| (mu.points().row(i) - nu.points().row(j)).norm_squared())
        .sum();
    Ok((cost / n).sqrt())
}

/// Partition of `{0..N-1}` grouping rows that coincide within `tol`
/// (Euclidean distance) under transitive closure. Groups are sorted by
/// their smallest member and internally sorted.
pub fn group_by_position(points: &DMatrix<f64>, tol: f64) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (points.row(i) - points.row(j)).norm() <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj.max(ri)] = rj.min(ri);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_to_group: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_to_group[r] {
            Some(g) => groups[g].push(i),
            None => {
                root_to_group[r] = Some(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Barycentric projection of a state-costate ensemble over `R^{2d}`:
/// the group mean of the second block of coordinates for each distinct
/// first-block position.
#[derive(Debug, Clone)]
pub struct MultiplierMap {
    /// Atom indices per position group.
    pub groups: Vec<Vec<usize>>,
    /// Representative position of each group (first block).
    pub positions: Vec<DVector<f64>>,
    /// Group-mean of the second block (the multiplier values).
    pub values: Vec<DVector<f64>>,
    /// Group index of each atom.
    pub atom_group: Vec<usize>,
}

impl MultiplierMap {
    /// Multiplier attached to atom `i`.
    pub fn value_at_atom(&self, i: usize) -> &DVector<f64> {
        &self.values[self.atom_group[i]]
    }
}

/// Computes the barycentric projection of `nu` (an ensemble over `R^{2d}`).
pub fn barycentric_projection(nu: &EmpiricalMeasure, tol: f64) -> Result<MultiplierMap> {
    if nu.dim() % 2 != 0 {
        return Err(Error::Dimension {
            context: "barycentric_projection",
            expected: "even ambient dimension 2d".into(),
            got: format!("{}", nu.dim()),
        });
    }
    let d = nu.dim() / 2;
    let first = nu.points().columns(0, d).into_owned();
    let groups = group_by_position(&first, tol);
    let mut positions = Vec::with_capacity(groups.len());
    let mut values = Vec::with_capacity(groups.len());
    let mut atom_group = vec![0_usize; nu.len()];
    for (g, members) in groups.iter().enumerate() {
        let mut pos = DVector::zeros(d);
        let mut val = DVector::zeros(d);
        for &i in members {
            pos += first.row(i).transpose();
            val += nu.points().row(i).columns(d, d).transpose();
            atom_group[i] = g;
        }
        let m = members.len() as f64;
        positions.push(pos / m);
        values.push(val / m);
    }
    Ok(MultiplierMap {
        groups,
        positions,
        values,
        atom_group,
    })
}
