//! Calculus on the uniform N-atom lift: random vectors, lifted gradients
//! and Hessians of law-invariant functionals, conditional expectation,
//! composition operators and the horizontal/vertical split.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measure::{group_by_position, EmpiricalMeasure};

/// Square-integrable random vector on the uniform N-atom space, stored as
/// an N x k matrix (atom per row). The inner product carries the uniform
/// weight: `<X, Y> = (1/N) sum_i <x_i, y_i>`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVector {
    values: DMatrix<f64>,
}

impl RandomVector {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            values: DMatrix::zeros(n, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Value at atom `i` as a column vector.
    pub fn atom(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn set_atom(&mut self, i: usize, v: &DVector<f64>) {
        self.values.set_row(i, &v.transpose());
    }

    /// Push-forward law; on the atomic space this is the same point list.
    pub fn law(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(self.values.clone())
    }

    pub fn from_measure(mu: &EmpiricalMeasure) -> Self {
        Self {
            values: mu.points().clone(),
        }
    }

    /// Uniformly weighted inner product.
    pub fn inner(&self, other: &RandomVector) -> f64 {
        assert_eq!(self.values.shape(), other.values.shape());
        self.values.dot(&other.values) / self.len() as f64
    }

    /// Norm induced by [`RandomVector::inner`].
    pub fn norm(&self) -> f64 {
        (self.values.norm_squared() / self.len() as f64).sqrt()
    }

    /// Atom-major flattening (atom i occupies the slice `i*dim..(i+1)*dim`).
    pub fn flatten(&self) -> DVector<f64> {
        let (n, k) = self.values.shape();
        DVector::from_fn(n * k, |idx, _| self.values[(idx / k, idx % k)])
    }

    pub fn from_flat(flat: &DVector<f64>, n: usize, dim: usize) -> Self {
        assert_eq!(flat.len(), n * dim);
        Self {
            values: DMatrix::from_fn(n, dim, |i, c| flat[i * dim + c]),
        }
    }

    /// Horizontal concatenation of per-atom values.
    pub fn concat(parts: &[&RandomVector]) -> Self {
        let n = parts[0].len();
        let dim: usize = parts.iter().map(|p| p.dim()).sum();
        let mut values = DMatrix::zeros(n, dim);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.len(), n);
            values.view_mut((0, off), (n, p.dim())).copy_from(p.values());
            off += p.dim();
        }
        Self { values }
    }
}

impl std::ops::Sub<&RandomVector> for &RandomVector {
    type Output = RandomVector;
    fn sub(self, rhs: &RandomVector) -> RandomVector {
        RandomVector::new(&self.values - &rhs.values)
    }
}

impl std::ops::Add<&RandomVector> for &RandomVector {
    type Output = RandomVector;
    fn add(self, rhs: &RandomVector) -> RandomVector {
        RandomVector::new(&self.values + &rhs.values)
    }
}

/// Dense linear map between lifted spaces, stored in the standard
/// coordinate basis with atom-major stacking. With uniform weights the
/// adjoint is the plain matrix transpose.
#[derive(Debug, Clone)]
pub struct LiftedOperator {
    matrix: DMatrix<f64>,
    n: usize,
    dim_in: usize,
    dim_out: usize,
}

impl LiftedOperator {
    pub fn new(matrix: DMatrix<f64>, n: usize, dim_in: usize, dim_out: usize) -> Self {
        assert_eq!(matrix.nrows(), n * dim_out);
        assert_eq!(matrix.ncols(), n * dim_in);
        Self {
            matrix,
            n,
            dim_in,
            dim_out,
        }
    }

    pub fn identity(n: usize, dim: usize) -> Self {
        Self::new(DMatrix::identity(n * dim, n * dim), n, dim, dim)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn apply(&self, x: &RandomVector) -> RandomVector {
        assert_eq!(x.len(), self.n);
        assert_eq!(x.dim(), self.dim_in);
        RandomVector::from_flat(&(&self.matrix * x.flatten()), self.n, self.dim_out)
    }

    pub fn adjoint(&self) -> Self {
        Self::new(self.matrix.transpose(), self.n, self.dim_out, self.dim_in)
    }
}

/// Law-invariant functional with its Wasserstein derivative kernels: the
/// value, the gradient kernel, the local Hessian coefficient and the
/// nonlocal Hessian kernel.
pub trait MeasureFunctional {
    fn value(&self, mu: &EmpiricalMeasure) -> f64;
    /// Gradient kernel evaluated at probe point `y`.
    fn grad_kernel(&self, mu: &EmpiricalMeasure, y: &DVector<f64>) -> DVector<f64>;
    /// Base-point derivative of the gradient kernel (d x d).
    fn local_hessian(&self, mu: &EmpiricalMeasure, y: &DVector<f64>) -> DMatrix<f64>;
    /// Nonlocal Hessian kernel at the probe pair `(y, z)` (d x d).
    fn nonlocal_hessian(
        &self,
        mu: &EmpiricalMeasure,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DMatrix<f64>;
}

/// `Phi(mu) = int |x|^2 dmu`.
pub struct SecondMoment;

impl MeasureFunctional for SecondMoment {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        mu.second_moment()
    }
    fn grad_kernel(&self, _mu: &EmpiricalMeasure, y: &DVector<f64>) -> DVector<f64> {
        2.0 * y
    }
    fn local_hessian(&self, mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(mu.dim(), mu.dim()) * 2.0
    }
    fn nonlocal_hessian(
        &self,
        mu: &EmpiricalMeasure,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(mu.dim(), mu.dim())
    }
}

/// `Phi(mu) = |int x dmu|^2`.
pub struct SquaredMean;

impl MeasureFunctional for SquaredMean {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        mu.mean().norm_squared()
    }
    fn grad_kernel(&self, mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DVector<f64> {
        2.0 * mu.mean()
    }
    fn local_hessian(&self, mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(mu.dim(), mu.dim())
    }
    fn nonlocal_hessian(
        &self,
        mu: &EmpiricalMeasure,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::identity(mu.dim(), mu.dim()) * 2.0
    }
}

/// `Phi(mu) = <a, int x dmu>`; linear, so the Hessian vanishes.
pub struct LinearMoment {
    pub weight: DVector<f64>,
}

impl MeasureFunctional for LinearMoment {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        self.weight.dot(mu.mean())
    }
    fn grad_kernel(&self, _mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DVector<f64> {
        self.weight.clone()
    }
    fn local_hessian(&self, mu: &EmpiricalMeasure, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(mu.dim(), mu.dim())
    }
    fn nonlocal_hessian(
        &self,
        mu: &EmpiricalMeasure,
        _y: &DVector<f64>,
        _z: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(mu.dim(), mu.dim())
    }
}

/// Lift of the functional: `Phi_tilde(X) = Phi(law(X))`.
pub fn lifted_value(f: &dyn MeasureFunctional, x: &RandomVector) -> Result<f64> {
    Ok(f.value(&x.law()?))
}

/// Gradient of the lift: atom `i` carries the gradient kernel evaluated at
/// `x_i` under the law of `X`.
pub fn lifted_gradient(f: &dyn MeasureFunctional, x: &RandomVector) -> Result<RandomVector> {
    let mu = x.law()?;
    let mut out = RandomVector::zeros(x.len(), x.dim());
    for i in 0..x.len() {
        let g = f.grad_kernel(&mu, &x.atom(i));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluatorFailure {
                name: "grad_kernel",
                detail: format!("atom {i}"),
            });
        }
        out.set_atom(i, &g);
    }
    Ok(out)
}

/// Lifted Hessian split into its multiplication part and its kernel part
/// (the kernel matrix already carries the `1/N` weight, so the operator is
/// the plain sum of the two).
#[derive(Debug, Clone)]
pub struct HessianSplit {
    pub mult: LiftedOperator,
    pub kernel: LiftedOperator,
}

impl HessianSplit {
    pub fn full(&self) -> LiftedOperator {
        LiftedOperator::new(
            self.mult.matrix() + self.kernel.matrix(),
            self.mult.n(),
            self.mult.dim_in(),
            self.mult.dim_out(),
        )
    }
}

/// Hessian of the lift: multiplication by the local coefficient plus the
/// `1/N`-weighted nonlocal kernel.
pub fn lifted_hessian(f: &dyn MeasureFunctional, x: &RandomVector) -> Result<HessianSplit> {
    let mu = x.law()?;
    let (n, d) = (x.len(), x.dim());
    let w = 1.0 / n as f64;
    let mut mult = DMatrix::zeros(n * d, n * d);
    let mut kernel = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        let xi = x.atom(i);
        let local = f.local_hessian(&mu, &xi);
        mult.view_mut((i * d, i * d), (d, d)).copy_from(&local);
        for j in 0..n {
            let k = f.nonlocal_hessian(&mu, &xi, &x.atom(j)) * w;
            kernel.view_mut((i * d, j * d), (d, d)).copy_from(&k);
        }
    }
    Ok(HessianSplit {
        mult: LiftedOperator::new(mult, n, d, d),
        kernel: LiftedOperator::new(kernel, n, d, d),
    })
}

/// Atom partition induced by the position groups of a conditioning vector.
#[derive(Debug, Clone)]
pub struct GroupStructure {
    pub groups: Vec<Vec<usize>>,
    pub atom_group: Vec<usize>,
    /// Representative value per group (the common conditioning value).
    pub representatives: Vec<DVector<f64>>,
    n: usize,
}

impl GroupStructure {
    pub fn from_vector(x: &RandomVector, tol: f64) -> Self {
        let groups = group_by_position(x.values(), tol);
        let mut atom_group = vec![0_usize; x.len()];
        let mut representatives = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                atom_group[i] = g;
            }
            representatives.push(x.atom(members[0]));
        }
        Self {
            groups,
            atom_group,
            representatives,
            n: x.len(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Uniform weight of group `g`.
    pub fn weight(&self, g: usize) -> f64 {
        self.groups[g].len() as f64 / self.n as f64
    }

    /// Orthonormal (in the lifted inner product) basis of the group-constant
    /// subspace for `dim`-valued vectors: one column per (group, coordinate).
    pub fn horizontal_basis(&self, dim: usize) -> DMatrix<f64> {
        let g_count = self.group_count();
        let mut b = DMatrix::zeros(self.n * dim, g_count * dim);
        for (g, members) in self.groups.iter().enumerate() {
            let scale = (self.n as f64 / members.len() as f64).sqrt();
            for &i in members {
                for c in 0..dim {
                    b[(i * dim + c, g * dim + c)] = scale;
                }
            }
        }
        b
    }

    /// Orthonormal basis of the orthogonal complement (Helmert vectors
    /// within each group, tensored with the coordinate directions).
    pub fn vertical_basis(&self, dim: usize) -> DMatrix<f64> {
        let v_count: usize = self.groups.iter().map(|g| g.len() - 1).sum();
        let mut b = DMatrix::zeros(self.n * dim, v_count * dim);
        let mut col_block = 0;
        for members in &self.groups {
            for t in 1..members.len() {
                // (e_{m_0} + .. + e_{m_{t-1}} - t e_{m_t}) scaled to unit
                // lifted norm: squared norm is t(t+1)/N.
                let scale = (self.n as f64 / (t as f64 * (t as f64 + 1.0))).sqrt();
                for c in 0..dim {
                    let col = col_block * dim + c;
                    for (s, &m) in members.iter().enumerate().take(t) {
                        let _ = s;
                        b[(m * dim + c, col)] = scale;
                    }
                    b[(members[t] * dim + c, col)] = -(t as f64) * scale;
                }
                col_block += 1;
            }
        }
        b
    }
}

/// Conditional expectation `E[H | sigma(X)]`: group means of `H` over the
/// position groups of `X`. Idempotent and self-adjoint.
pub fn conditional_expectation(x: &RandomVector, h: &RandomVector, tol: f64) -> Result<RandomVector> {
    if x.len() != h.len() {
        return Err(Error::Dimension {
            context: "conditional_expectation",
            expected: format!("{} atoms", x.len()),
            got: format!("{} atoms", h.len()),
        });
    }
    let structure = GroupStructure::from_vector(x, tol);
    let mut out = RandomVector::zeros(h.len(), h.dim());
    for members in &structure.groups {
        let mut mean = DVector::zeros(h.dim());
        for &i in members {
            mean += h.atom(i);
        }
        mean /= members.len() as f64;
        for &i in members {
            out.set_atom(i, &mean);
        }
    }
    Ok(out)
}

/// Matrix of the conditional expectation acting on `dim`-valued vectors.
pub fn conditional_expectation_matrix(x: &RandomVector, dim: usize, tol: f64) -> DMatrix<f64> {
    let structure = GroupStructure::from_vector(x, tol);
    let n = x.len();
    let mut m = DMatrix::zeros(n * dim, n * dim);
    for members in &structure.groups {
        let w = 1.0 / members.len() as f64;
        for &i in members {
            for &j in members {
                for c in 0..dim {
                    m[(i * dim + c, j * dim + c)] = w;
                }
            }
        }
    }
    m
}

/// Function on the distinct values of a conditioning vector.
#[derive(Debug, Clone)]
pub struct GroupedFunction {
    pub structure: GroupStructure,
    pub values: Vec<DVector<f64>>,
}

impl GroupedFunction {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// L2 norm under the group-weighted (law) measure.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for (g, v) in self.values.iter().enumerate() {
            acc += self.structure.weight(g) * v.norm_squared();
        }
        acc.sqrt()
    }
}

/// Composition operator: `(C_X xi)(atom i) = xi(X_i)`, an isometry from the
/// law space into the lift.
pub fn composition_operator(x: &RandomVector, xi: &GroupedFunction) -> Result<RandomVector> {
    if xi.structure.group_count() != GroupStructure::from_vector(x, crate::tolerances::GROUP_TOL).group_count()
        || xi.structure.n() != x.len()
    {
        return Err(Error::MissingGroupControl {
            group: xi.structure.group_count(),
        });
    }
    let dim = xi.dim();
    let mut out = RandomVector::zeros(x.len(), dim);
    for (g, members) in xi.structure.groups.iter().enumerate() {
        for &i in members {
            out.set_atom(i, &xi.values[g]);
        }
    }
    Ok(out)
}

/// Adjoint of the composition operator: group means of `H`, indexed by the
/// distinct values of `X`.
pub fn adjoint_composition(x: &RandomVector, h: &RandomVector, tol: f64) -> Result<GroupedFunction> {
    if x.len() != h.len() {
        return Err(Error::Dimension {
            context: "adjoint_composition",
            expected: format!("{} atoms", x.len()),
            got: format!("{} atoms", h.len()),
        });
    }
    let structure = GroupStructure::from_vector(x, tol);
    let mut values = Vec::with_capacity(structure.group_count());
    for members in &structure.groups {
        let mut mean = DVector::zeros(h.dim());
        for &i in members {
            mean += h.atom(i);
        }
        values.push(mean / members.len() as f64);
    }
    Ok(GroupedFunction { structure, values })
}

/// Compression of `a` to the group-constant subspace of `x` and its
/// restriction to the orthogonal complement, both in orthonormal bases.
/// Errors when `a` does not leave the split invariant within `tol`.
pub fn horizontal_vertical_split(
    x: &RandomVector,
    a: &LiftedOperator,
    tol: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let structure = GroupStructure::from_vector(x, crate::tolerances::GROUP_TOL);
    split_with_structure(&structure, a, tol, "operator")
}

/// Same as [`horizontal_vertical_split`] with a caller-provided grouping.
pub fn split_with_structure(
    structure: &GroupStructure,
    a: &LiftedOperator,
    tol: f64,
    block: &'static str,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    assert_eq!(structure.n(), a.n());
    let b_in = structure.horizontal_basis(a.dim_in());
    let b_out = structure.horizontal_basis(a.dim_out());
    let v_in = structure.vertical_basis(a.dim_in());
    let v_out = structure.vertical_basis(a.dim_out());
    let w = 1.0 / a.n() as f64;

    let hor = (b_out.transpose() * a.matrix() * &b_in) * w;
    let vert = (v_out.transpose() * a.matrix() * &v_in) * w;

    // Off-diagonal couplings must vanish for the split to be meaningful.
    let mut defect: f64 = 0.0;
    if v_out.ncols() > 0 {
        defect = defect.max(((v_out.transpose() * a.matrix() * &b_in) * w).norm());
    }
    if v_in.ncols() > 0 {
        defect = defect.max(((b_out.transpose() * a.matrix() * &v_in) * w).norm());
    }
    if defect > tol {
        return Err(Error::InvarianceViolation {
            block,
            defect,
            tol,
        });
    }
    Ok((hor, vert))
}

/// Intrinsic Hessian matrix of a functional on the distinct atoms of a
/// grouped ensemble, expressed in the orthonormalized group basis:
/// `M(z_g) delta_{gh} + sqrt(w_g) K(z_g, z_h) sqrt(w_h)`.
pub fn intrinsic_hessian_matrix(
    f: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    structure: &GroupStructure,
) -> DMatrix<f64> {
    let d = mu.dim();
    let g_count = structure.group_count();
    let mut out = DMatrix::zeros(g_count * d, g_count * d);
    for g in 0..g_count {
        let zg = &structure.representatives[g];
        let local = f.local_hessian(mu, zg);
        out.view_mut((g * d, g * d), (d, d)).copy_from(&local);
        for h in 0..g_count {
            let kernel = f.nonlocal_hessian(mu, zg, &structure.representatives[h])
                * (structure.weight(g).sqrt() * structure.weight(h).sqrt());
            let mut view = out.view_mut((g * d, h * d), (d, d));
            view += kernel;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tolerances::{DERIVATIVE_REL_TOL, EXACT_OP_TOL, FD_STEP, GROUP_TOL, HESSIAN_FD_TOL};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rv(rows: usize, cols: usize, data: &[f64]) -> RandomVector {
        RandomVector::new(DMatrix::from_row_slice(rows, cols, data))
    }

    fn random_rv(rng: &mut ChaCha8Rng, n: usize, k: usize) -> RandomVector {
        RandomVector::new(DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0)))
    }

    fn fd_gradient(f: &dyn MeasureFunctional, x: &RandomVector, h: f64) -> RandomVector {
        // Central differences of the lifted value, rescaled to the lifted
        // gradient convention (the lifted inner product carries 1/N).
        let n = x.len() as f64;
        let mut out = RandomVector::zeros(x.len(), x.dim());
        for i in 0..x.len() {
            for c in 0..x.dim() {
                let mut plus = x.clone();
                plus.values_mut()[(i, c)] += h;
                let mut minus = x.clone();
                minus.values_mut()[(i, c)] -= h;
                let df = (lifted_value(f, &plus).unwrap() - lifted_value(f, &minus).unwrap())
                    / (2.0 * h);
                out.values_mut()[(i, c)] = n * df;
            }
        }
        out
    }

    fn builtins() -> Vec<Box<dyn MeasureFunctional>> {
        vec![
            Box::new(SecondMoment),
            Box::new(SquaredMean),
            Box::new(LinearMoment {
                weight: DVector::from_element(2, 1.0),
            }),
        ]
    }

    #[test]
    fn gradient_examples() {
        // Phi = int x^2 dmu: entries 2 x_i.
        let x = rv(3, 1, &[0.5, -1.0, 2.0]);
        let g = lifted_gradient(&SecondMoment, &x).unwrap();
        for i in 0..3 {
            assert!((g.values()[(i, 0)] - 2.0 * x.values()[(i, 0)]).abs() < 1e-14);
        }

        // Phi = (int x dmu)^2 on X = (0, 1, 2): every entry 2 * mean = 2.
        let x = rv(3, 1, &[0.0, 1.0, 2.0]);
        let g = lifted_gradient(&SquaredMean, &x).unwrap();
        for i in 0..3 {
            assert!((g.values()[(i, 0)] - 2.0).abs() < 1e-14);
        }
        // Finite-difference oracle for the same value.
        let fd = fd_gradient(&SquaredMean, &x, FD_STEP);
        assert!((&g - &fd).norm() < 1e-9);

        // Linear mean: constant kernel.
        let x = rv(4, 1, &[3.0, -2.0, 0.0, 7.0]);
        let f = LinearMoment {
            weight: DVector::from_element(1, 1.0),
        };
        let g = lifted_gradient(&f, &x).unwrap();
        for i in 0..4 {
            assert!((g.values()[(i, 0)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for f in builtins() {
            for _ in 0..20 {
                let x = random_rv(&mut rng, 6, 2);
                let g = lifted_gradient(f.as_ref(), &x).unwrap();
                let fd = fd_gradient(f.as_ref(), &x, FD_STEP);
                let scale = g.norm().max(1.0);
                assert!((&g - &fd).norm() / scale < DERIVATIVE_REL_TOL);
            }
        }
    }

    #[test]
    fn hessian_examples() {
        // Phi = int x^2: operator 2 I, kernel zero.
        let x = rv(3, 1, &[0.4, 1.0, -0.3]);
        let h = lifted_hessian(&SecondMoment, &x).unwrap();
        assert!((h.mult.matrix() - DMatrix::identity(3, 3) * 2.0).norm() < 1e-14);
        assert!(h.kernel.matrix().norm() < 1e-14);

        // Phi = (mean)^2 with N = 4: all matrix entries 2/N = 0.5.
        let x = rv(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let h = lifted_hessian(&SquaredMean, &x).unwrap().full();
        for i in 0..4 {
            for j in 0..4 {
                assert!((h.matrix()[(i, j)] - 0.5).abs() < 1e-14);
            }
        }

        // Linear functional: zero operator.
        let f = LinearMoment {
            weight: DVector::from_element(1, 1.0),
        };
        let h = lifted_hessian(&f, &x).unwrap().full();
        assert!(h.matrix().norm() < 1e-14);
    }

    #[test]
    fn hessian_matches_differenced_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for f in builtins() {
            let x = random_rv(&mut rng, 5, 2);
            let hess = lifted_hessian(f.as_ref(), &x).unwrap().full();
            for _ in 0..5 {
                let dir = random_rv(&mut rng, 5, 2);
                let h = FD_STEP;
                let mut plus = x.clone();
                *plus.values_mut() += dir.values() * h;
                let mut minus = x.clone();
                *minus.values_mut() -= dir.values() * h;
                let gp = lifted_gradient(f.as_ref(), &plus).unwrap();
                let gm = lifted_gradient(f.as_ref(), &minus).unwrap();
                let fd = RandomVector::new((gp.values() - gm.values()) / (2.0 * h));
                let action = hess.apply(&dir);
                let scale = action.norm().max(1.0);
                assert!((&action - &fd).norm() / scale < HESSIAN_FD_TOL);
            }
        }
    }

    #[test]
    fn adjoint_is_plain_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let a = LiftedOperator::new(
            DMatrix::from_fn(n * 2, n * 2, |_, _| rng.random_range(-1.0..1.0)),
            n,
            2,
            2,
        );
        let at = a.adjoint();
        for _ in 0..10 {
            let u = random_rv(&mut rng, n, 2);
            let w = random_rv(&mut rng, n, 2);
            let lhs = a.apply(&u).inner(&w);
            let rhs = u.inner(&at.apply(&w));
            assert!((lhs - rhs).abs() < EXACT_OP_TOL);
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        // Injective conditioning leaves H unchanged.
        let x = rv(3, 1, &[1.0, 2.0, 3.0]);
        let h = rv(3, 1, &[4.0, 6.0, 9.0]);
        let e = conditional_expectation(&x, &h, GROUP_TOL).unwrap();
        assert!((&e - &h).norm() < 1e-14);

        // Group averaging.
        let x = rv(3, 1, &[1.0, 1.0, 2.0]);
        let e = conditional_expectation(&x, &h, GROUP_TOL).unwrap();
        assert_eq!(e.values().as_slice(), &[5.0, 5.0, 9.0]);

        // Constant conditioning: overall mean.
        let x = rv(3, 1, &[7.0, 7.0, 7.0]);
        let e = conditional_expectation(&x, &h, GROUP_TOL).unwrap();
        for i in 0..3 {
            assert!((e.values()[(i, 0)] - 19.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn conditional_expectation_is_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rv(5, 1, &[1.0, 1.0, 2.0, 2.0, 3.0]);
        let m = conditional_expectation_matrix(&x, 2, GROUP_TOL);
        // Idempotent and self-adjoint.
        assert!((&m * &m - &m).norm() < EXACT_OP_TOL);
        assert!((&m - m.transpose()).norm() < EXACT_OP_TOL);
        // Fixes exactly the group-constant vectors.
        let xi = GroupedFunction {
            structure: GroupStructure::from_vector(&x, GROUP_TOL),
            values: vec![
                DVector::from_vec(vec![1.0, -1.0]),
                DVector::from_vec(vec![0.5, 2.0]),
                DVector::from_vec(vec![3.0, 0.0]),
            ],
        };
        let fixed = composition_operator(&x, &xi).unwrap();
        let projected = RandomVector::from_flat(&(&m * fixed.flatten()), 5, 2);
        assert!((&projected - &fixed).norm() < EXACT_OP_TOL);
        // Random vectors project to their group means.
        let h = random_rv(&mut rng, 5, 2);
        let via_matrix = RandomVector::from_flat(&(&m * h.flatten()), 5, 2);
        let via_groups = conditional_expectation(&x, &h, GROUP_TOL).unwrap();
        assert!((&via_matrix - &via_groups).norm() < EXACT_OP_TOL);
    }

    #[test]
    fn composition_and_adjoint() {
        // Injective case: values pass through and come back.
        let x = rv(2, 1, &[1.0, 2.0]);
        let structure = GroupStructure::from_vector(&x, GROUP_TOL);
        let xi = GroupedFunction {
            structure,
            values: vec![DVector::from_element(1, 5.0), DVector::from_element(1, 7.0)],
        };
        let composed = composition_operator(&x, &xi).unwrap();
        assert_eq!(composed.values().as_slice(), &[5.0, 7.0]);
        let back = adjoint_composition(&x, &composed, GROUP_TOL).unwrap();
        assert!((back.values[0][0] - 5.0).abs() < 1e-14);
        assert!((back.values[1][0] - 7.0).abs() < 1e-14);

        // Group means.
        let x = rv(3, 1, &[1.0, 1.0, 2.0]);
        let h = rv(3, 1, &[4.0, 6.0, 9.0]);
        let adj = adjoint_composition(&x, &h, GROUP_TOL).unwrap();
        assert!((adj.values[0][0] - 5.0).abs() < 1e-14);
        assert!((adj.values[1][0] - 9.0).abs() < 1e-14);
    }

    #[test]
    fn composition_is_isometry_and_projection_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rv(4, 1, &[0.0, 0.0, 1.0, 2.0]);
        let structure = GroupStructure::from_vector(&x, GROUP_TOL);
        for _ in 0..10 {
            let xi = GroupedFunction {
                structure: structure.clone(),
                values: (0..structure.group_count())
                    .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
            };
            let lifted = composition_operator(&x, &xi).unwrap();
            assert!((lifted.norm() - xi.norm()).abs() < EXACT_OP_TOL);
        }
        // C_X C_X* equals the conditional expectation entrywise.
        let h = random_rv(&mut rng, 4, 2);
        let through = composition_operator(&x, &adjoint_composition(&x, &h, GROUP_TOL).unwrap())
            .unwrap();
        let direct = conditional_expectation(&x, &h, GROUP_TOL).unwrap();
        assert!((&through - &direct).norm() < EXACT_OP_TOL);
    }

    #[test]
    fn split_examples() {
        // Injective conditioning: no vertical space, horizontal is the
        // operator in the value basis.
        let x = rv(2, 1, &[1.0, 2.0]);
        let a = LiftedOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]), 2, 1, 1);
        let (hor, vert) = horizontal_vertical_split(&x, &a, 1e-10).unwrap();
        assert_eq!(vert.nrows(), 0);
        assert!((hor[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((hor[(1, 1)] - 3.0).abs() < 1e-14);

        // Duplicated pair with the squared-mean Hessian: horizontal scalar 2,
        // vertical zero (direct 2x2 computation: A = [[1,1],[1,1]]).
        let x = rv(2, 1, &[1.0, 1.0]);
        let a = lifted_hessian(&SquaredMean, &x).unwrap().full();
        assert!((a.matrix() - DMatrix::from_element(2, 2, 1.0)).norm() < 1e-14);
        let (hor, vert) = horizontal_vertical_split(&x, &a, 1e-10).unwrap();
        assert_eq!(hor.shape(), (1, 1));
        assert!((hor[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(vert.shape(), (1, 1));
        assert!(vert[(0, 0)].abs() < 1e-14);

        // Identity splits into identities.
        let x = rv(3, 1, &[1.0, 1.0, 2.0]);
        let a = LiftedOperator::identity(3, 1);
        let (hor, vert) = horizontal_vertical_split(&x, &a, 1e-10).unwrap();
        assert!((hor - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((vert - DMatrix::identity(1, 1)).norm() < 1e-12);
    }

    #[test]
    fn split_rejects_non_invariant_operator() {
        let x = rv(2, 1, &[1.0, 1.0]);
        // Maps the group-constant vector onto the antisymmetric one.
        let a = LiftedOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), 2, 1, 1);
        let err = horizontal_vertical_split(&x, &a, 1e-10).unwrap_err();
        matches!(err, Error::InvarianceViolation { .. })
            .then_some(())
            .expect("expected invariance violation");
    }

    #[test]
    fn horizontal_compression_equals_intrinsic_hessian() {
        // Duplicated-particle fixture; unitary conjugation identity.
        let x = rv(4, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 2.0, 0.5, 0.5]);
        let mu = x.law().unwrap();
        let structure = GroupStructure::from_vector(&x, GROUP_TOL);
        for f in builtins() {
            let lifted = lifted_hessian(f.as_ref(), &x).unwrap().full();
            let (hor, _) = horizontal_vertical_split(&x, &lifted, 1e-10).unwrap();
            let intrinsic = intrinsic_hessian_matrix(f.as_ref(), &mu, &structure);
            assert!(
                (&hor - &intrinsic).norm() < 1e-12,
                "conjugation identity failed: defect {}",
                (&hor - &intrinsic).norm()
            );
        }
    }

    #[test]
    fn vertical_restriction_is_multiplication_part() {
        let x = rv(4, 1, &[1.0, 1.0, 2.0, 2.0]);
        let structure = GroupStructure::from_vector(&x, GROUP_TOL);
        for f in builtins_1d() {
            let split = lifted_hessian(f.as_ref(), &x).unwrap();
            let (_, vert_full) =
                split_with_structure(&structure, &split.full(), 1e-10, "test").unwrap();
            let (_, vert_mult) =
                split_with_structure(&structure, &split.mult, 1e-10, "test").unwrap();
            assert!((&vert_full - &vert_mult).norm() < 1e-12);
        }
    }

    fn builtins_1d() -> Vec<Box<dyn MeasureFunctional>> {
        vec![
            Box::new(SecondMoment),
            Box::new(SquaredMean),
            Box::new(LinearMoment {
                weight: DVector::from_element(1, 1.0),
            }),
        ]
    }
}
