//! Finite-dimensional inner-product spaces described by Gram matrices.
//!
//! A [`SpaceDescriptor`] carries the Gram matrix `G` of its inner product
//! `<x, y> = x^T G y` and, optionally, a linear constraint `w^T x = 0`
//! (a weighted zero-mean condition). Constrained spaces are handled by
//! projection; all derived quantities (dual norms, Riesz maps, spectra) are
//! computed on the constrained subspace through an orthonormal basis of it.
//!
//! Dual vectors are plain coordinate arrays paired with primal vectors by the
//! dot product. Operators that produce duals apply the Gram weighting
//! themselves, so no Gram matrix is ever applied twice.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

/// Coordinates of an element of a dual space. Pairing with a primal vector
/// `x` is `f.dot(x)`; any Gram weighting is already contained in `f`.
pub type DualVector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gram matrix of `{label}` is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { label: String, asymmetry: f64 },
    #[error("gram matrix of `{label}` is not positive definite")]
    NotPositiveDefinite { label: String },
    #[error("constraint weights must be strictly positive")]
    InvalidWeights,
    #[error("operator is not symmetric in the inner product (relative asymmetry {0:e})")]
    OperatorNotSymmetric(f64),
    #[error("operator has a negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),
    #[error("empty space")]
    Empty,
}

const SYMMETRY_TOL: f64 = 1e-14;

/// Finite-dimensional inner-product space with an optional weighted zero-mean
/// constraint.
#[derive(Clone, Debug)]
pub struct SpaceDescriptor {
    label: String,
    gram: DMatrix<f64>,
    constraint: Option<Constraint>,
    /// Cholesky factor of the Gram matrix restricted to the admissible
    /// subspace (the full Gram matrix when unconstrained).
    reduced: Cholesky<f64, Dyn>,
}

#[derive(Clone, Debug)]
struct Constraint {
    weights: DVector<f64>,
    /// Orthonormal (Euclidean) basis of `{x : w^T x = 0}`, `dim x (dim-1)`.
    basis: DMatrix<f64>,
}

fn check_symmetric(label: &str, m: &DMatrix<f64>) -> Result<(), SpaceError> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax() / scale;
    if asym > SYMMETRY_TOL {
        return Err(SpaceError::NotSymmetric { label: label.to_string(), asymmetry: asym });
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Orthonormal basis of the Euclidean orthogonal complement of `w`, built
/// from a Householder reflector that maps `e_0` onto `-w/|w|`.
fn complement_basis(w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let norm = w.norm();
    let mut v = w / norm;
    // w_0 > 0, so v = w/|w| + e_0 has no cancellation.
    v[0] += 1.0;
    let vv = v.norm_squared();
    let mut h = DMatrix::<f64>::identity(n, n);
    h -= (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, n - 1).into_owned()
}

impl SpaceDescriptor {
    /// Unconstrained space with the given SPD Gram matrix.
    pub fn new(label: impl Into<String>, gram: DMatrix<f64>) -> Result<Self, SpaceError> {
        let label = label.into();
        if gram.nrows() == 0 {
            return Err(SpaceError::Empty);
        }
        if gram.nrows() != gram.ncols() {
            return Err(SpaceError::DimensionMismatch { expected: gram.nrows(), got: gram.ncols() });
        }
        check_symmetric(&label, &gram)?;
        let gram = symmetrize(&gram);
        let reduced = Cholesky::new(gram.clone())
            .ok_or_else(|| SpaceError::NotPositiveDefinite { label: label.clone() })?;
        Ok(Self { label, gram, constraint: None, reduced })
    }

    /// Euclidean space `R^n` with the identity Gram matrix.
    pub fn euclidean(label: impl Into<String>, dim: usize) -> Result<Self, SpaceError> {
        Self::new(label, DMatrix::identity(dim, dim))
    }

    /// Space of vectors with zero weighted mean `sum_i w_i x_i = 0`.
    ///
    /// The Gram matrix must be SPD on the whole coordinate space; only its
    /// restriction to the constrained subspace enters norms and duals.
    pub fn zero_mean(
        label: impl Into<String>,
        gram: DMatrix<f64>,
        weights: DVector<f64>,
    ) -> Result<Self, SpaceError> {
        let label = label.into();
        let n = gram.nrows();
        if n < 2 {
            return Err(SpaceError::Empty);
        }
        if gram.ncols() != n {
            return Err(SpaceError::DimensionMismatch { expected: n, got: gram.ncols() });
        }
        if weights.len() != n {
            return Err(SpaceError::DimensionMismatch { expected: n, got: weights.len() });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(SpaceError::InvalidWeights);
        }
        check_symmetric(&label, &gram)?;
        let gram = symmetrize(&gram);
        if Cholesky::new(gram.clone()).is_none() {
            return Err(SpaceError::NotPositiveDefinite { label });
        }
        let basis = complement_basis(&weights);
        let reduced_gram = symmetrize(&(basis.transpose() * &gram * &basis));
        let reduced = Cholesky::new(reduced_gram)
            .ok_or_else(|| SpaceError::NotPositiveDefinite { label: label.clone() })?;
        Ok(Self { label, gram, constraint: Some(Constraint { weights, basis }), reduced })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of coordinates.
    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// Dimension of the admissible subspace (one less than `dim` when a
    /// zero-mean constraint is present).
    pub fn effective_dim(&self) -> usize {
        match self.constraint {
            Some(_) => self.dim() - 1,
            None => self.dim(),
        }
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.constraint.as_ref().map(|c| &c.weights)
    }

    pub fn is_constrained(&self) -> bool {
        self.constraint.is_some()
    }

    /// Orthonormal basis of the admissible subspace as columns.
    pub fn basis(&self) -> DMatrix<f64> {
        match &self.constraint {
            Some(c) => c.basis.clone(),
            None => DMatrix::identity(self.dim(), self.dim()),
        }
    }

    pub fn check_dim(&self, x: &DVector<f64>) -> Result<(), SpaceError> {
        if x.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// `x^T G y`.
    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64, SpaceError> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        Ok(x.dot(&(&self.gram * y)))
    }

    pub fn norm(&self, x: &DVector<f64>) -> Result<f64, SpaceError> {
        Ok(self.inner(x, x)?.max(0.0).sqrt())
    }

    /// Duality map `J x = G x`; satisfies `<Jx, x> = |x|^2` and `|Jx|_* = |x|`
    /// for admissible `x`.
    pub fn duality_map(&self, x: &DVector<f64>) -> Result<DualVector, SpaceError> {
        self.check_dim(x)?;
        Ok(&self.gram * x)
    }

    /// Inverse duality (Riesz) map: the admissible `r` with `<r, v> = f(v)`
    /// for every admissible `v`.
    pub fn riesz(&self, f: &DualVector) -> Result<DVector<f64>, SpaceError> {
        self.check_dim(f)?;
        Ok(match &self.constraint {
            Some(c) => {
                let reduced = c.basis.tr_mul(f);
                &c.basis * self.reduced.solve(&reduced)
            }
            None => self.reduced.solve(f),
        })
    }

    /// Dual norm `sup { f(v) : |v| <= 1, v admissible }`.
    pub fn dual_norm(&self, f: &DualVector) -> Result<f64, SpaceError> {
        self.check_dim(f)?;
        let value = match &self.constraint {
            Some(c) => {
                let reduced = c.basis.tr_mul(f);
                reduced.dot(&self.reduced.solve(&reduced))
            }
            None => f.dot(&self.reduced.solve(f)),
        };
        Ok(value.max(0.0).sqrt())
    }

    /// Subtracts the weighted mean; identity for unconstrained spaces.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, SpaceError> {
        self.check_dim(x)?;
        match &self.constraint {
            Some(c) => project_zero_mean(&c.weights, x),
            None => Ok(x.clone()),
        }
    }

    /// Canonical representative of a dual: removes the multiple of the
    /// weights so that the result annihilates the constant vector. The
    /// pairing with admissible vectors is unchanged.
    pub fn project_dual(&self, f: &DualVector) -> Result<DualVector, SpaceError> {
        self.check_dim(f)?;
        Ok(match &self.constraint {
            Some(c) => {
                let w = &c.weights;
                f - w * (f.sum() / w.sum())
            }
            None => f.clone(),
        })
    }

    /// Weighted mean `sum w_i x_i / sum w_i` (plain mean when unconstrained).
    pub fn weighted_mean(&self, x: &DVector<f64>) -> Result<f64, SpaceError> {
        self.check_dim(x)?;
        Ok(match &self.constraint {
            Some(c) => c.weights.dot(x) / c.weights.sum(),
            None => x.mean(),
        })
    }

    /// Eigenvalues (ascending) of the pencil `(a, G)` on the admissible
    /// subspace, for a symmetric `a`.
    pub fn pencil_eigenvalues(&self, a: &DMatrix<f64>) -> Result<DVector<f64>, SpaceError> {
        let n = self.dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(SpaceError::DimensionMismatch { expected: n, got: a.nrows() });
        }
        let a_red = match &self.constraint {
            Some(c) => c.basis.transpose() * a * &c.basis,
            None => a.clone(),
        };
        let l = self.reduced.l();
        let l_inv_a = l
            .solve_lower_triangular(&a_red)
            .ok_or(SpaceError::NotPositiveDefinite { label: self.label.clone() })?;
        let c = l
            .solve_lower_triangular(&l_inv_a.transpose())
            .ok_or(SpaceError::NotPositiveDefinite { label: self.label.clone() })?;
        let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(&c)).eigenvalues.iter().copied().collect();
        values.sort_by(|x, y| x.total_cmp(y));
        Ok(DVector::from_vec(values))
    }
}

/// `x - (sum w_i x_i / sum w_i) 1`.
pub fn project_zero_mean(weights: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>, SpaceError> {
    if weights.len() != x.len() {
        return Err(SpaceError::DimensionMismatch { expected: weights.len(), got: x.len() });
    }
    let mean = weights.dot(x) / weights.sum();
    Ok(x.add_scalar(-mean))
}

/// Operator norm of `embed: V -> H`, i.e. `sup { |embed u|_H : |u|_V <= 1 }`,
/// computed as the square root of the largest eigenvalue of the pencil
/// `(embed^T G_H embed, G_V)` on the admissible subspace of `V`.
pub fn poincare_constant(
    v: &SpaceDescriptor,
    h: &SpaceDescriptor,
    embed: &DMatrix<f64>,
) -> Result<f64, SpaceError> {
    if embed.ncols() != v.dim() {
        return Err(SpaceError::DimensionMismatch { expected: v.dim(), got: embed.ncols() });
    }
    if embed.nrows() != h.dim() {
        return Err(SpaceError::DimensionMismatch { expected: h.dim(), got: embed.nrows() });
    }
    let pulled_back = symmetrize(&(embed.transpose() * h.gram() * embed));
    let eig = v.pencil_eigenvalues(&pulled_back)?;
    Ok(eig[eig.len() - 1].max(0.0).sqrt())
}

/// Square root of an operator `e1` that is symmetric positive definite with
/// respect to the inner product of `space` (`G e1` symmetric). The result
/// `e2` satisfies `e2 * e2 = e1` and is itself `G`-symmetric.
pub fn sqrt_spd(space: &SpaceDescriptor, e1: &DMatrix<f64>) -> Result<DMatrix<f64>, SpaceError> {
    let n = space.dim();
    if e1.nrows() != n || e1.ncols() != n {
        return Err(SpaceError::DimensionMismatch { expected: n, got: e1.nrows() });
    }
    let g = space.gram();
    let ge = g * e1;
    let scale = ge.amax().max(f64::MIN_POSITIVE);
    let asym = (&ge - ge.transpose()).amax() / scale;
    if asym > 1e-10 {
        return Err(SpaceError::OperatorNotSymmetric(asym));
    }
    // Whole-space Cholesky of G: the constraint subspace is invariant for the
    // operators this is applied to, so the full-space root restricts to it.
    let chol = Cholesky::new(g.clone())
        .ok_or_else(|| SpaceError::NotPositiveDefinite { label: space.label().to_string() })?;
    let l = chol.l();
    // Symmetric similarity transform: L^T e1 L^{-T} = L^{-1} (G e1) L^{-T}.
    let tmp = l.solve_lower_triangular(&symmetrize(&ge)).expect("triangular solve");
    let sym = l.solve_lower_triangular(&tmp.transpose()).expect("triangular solve");
    let eig = SymmetricEigen::new(symmetrize(&sym));
    let lmax = eig.eigenvalues.amax();
    let floor = -1e-12 * lmax.max(1.0);
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&v| v < floor) {
        return Err(SpaceError::NegativeEigenvalue(neg));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let root_sym = q * DMatrix::from_diagonal(&roots) * q.transpose();
    // e2 = L^{-T} root_sym L^T
    let lt = l.transpose();
    let right = &root_sym * &lt;
    let e2 = lt.solve_upper_triangular(&right).expect("triangular solve");
    Ok(e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn inner_examples() {
        let id = SpaceDescriptor::euclidean("E", 2).unwrap();
        assert_eq!(id.inner(&dvec(&[1.0, 0.0]), &dvec(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(id.inner(&dvec(&[3.0, 4.0]), &dvec(&[3.0, 4.0])).unwrap(), 25.0);
        let d = SpaceDescriptor::new("D", DMatrix::from_diagonal(&dvec(&[2.0, 3.0]))).unwrap();
        assert_eq!(d.inner(&dvec(&[1.0, 1.0]), &dvec(&[1.0, 1.0])).unwrap(), 5.0);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let id = SpaceDescriptor::euclidean("E", 2).unwrap();
        let err = id.inner(&dvec(&[1.0]), &dvec(&[1.0, 2.0])).unwrap_err();
        assert_eq!(err, SpaceError::DimensionMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn duality_map_examples() {
        let id = SpaceDescriptor::euclidean("E", 2).unwrap();
        assert_eq!(id.duality_map(&dvec(&[1.0, 2.0])).unwrap(), dvec(&[1.0, 2.0]));
        let d = SpaceDescriptor::new("D", DMatrix::from_diagonal(&dvec(&[2.0, 3.0]))).unwrap();
        assert_eq!(d.duality_map(&dvec(&[1.0, 1.0])).unwrap(), dvec(&[2.0, 3.0]));
        assert_eq!(d.duality_map(&DVector::zeros(2)).unwrap(), DVector::zeros(2));
        let x = dvec(&[0.3, -1.7]);
        let jx = d.duality_map(&x).unwrap();
        assert_abs_diff_eq!(d.dual_norm(&jx).unwrap(), d.norm(&x).unwrap(), epsilon = 1e-14);
        assert!(d.duality_map(&dvec(&[1.0])).is_err());
    }

    #[test]
    fn rejects_bad_grams() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(SpaceDescriptor::new("A", asym), Err(SpaceError::NotSymmetric { .. })));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SpaceDescriptor::new("I", indef), Err(SpaceError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn poincare_examples() {
        let v = SpaceDescriptor::euclidean("V", 3).unwrap();
        let h = SpaceDescriptor::euclidean("H", 3).unwrap();
        let id = DMatrix::identity(3, 3);
        assert_abs_diff_eq!(poincare_constant(&v, &h, &id).unwrap(), 1.0, epsilon = 1e-12);
        let v4 = SpaceDescriptor::new("V", DMatrix::identity(3, 3) * 4.0).unwrap();
        assert_abs_diff_eq!(poincare_constant(&v4, &h, &id).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_examples() {
        let e = SpaceDescriptor::euclidean("E", 2).unwrap();
        let id = DMatrix::identity(2, 2);
        assert!((sqrt_spd(&e, &id).unwrap() - &id).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&dvec(&[4.0, 9.0]));
        let r = sqrt_spd(&e, &d).unwrap();
        assert!((r - DMatrix::from_diagonal(&dvec(&[2.0, 3.0]))).amax() < 1e-13);
        let neg = DMatrix::from_diagonal(&dvec(&[4.0, -1.0]));
        assert!(matches!(sqrt_spd(&e, &neg), Err(SpaceError::NegativeEigenvalue(_))));
    }

    #[test]
    fn sqrt_in_weighted_inner_product() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = SpaceDescriptor::new("G", g.clone()).unwrap();
        // e1 = G^{-1} P with P SPD is G-symmetric positive.
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let e1 = g.clone().try_inverse().unwrap() * &p;
        let e2 = sqrt_spd(&s, &e1).unwrap();
        assert!((&e2 * &e2 - &e1).amax() < 1e-12);
        let ge2 = &g * &e2;
        assert!((&ge2 - ge2.transpose()).amax() < 1e-12);
    }

    #[test]
    fn zero_mean_projection_examples() {
        let w = dvec(&[1.0, 1.0]);
        assert_eq!(project_zero_mean(&w, &dvec(&[1.0, 3.0])).unwrap(), dvec(&[-1.0, 1.0]));
        assert_eq!(project_zero_mean(&w, &dvec(&[5.0, 5.0])).unwrap(), DVector::zeros(2));
        let z = dvec(&[-2.0, 2.0]);
        assert_eq!(project_zero_mean(&w, &z).unwrap(), z);
    }

    #[test]
    fn constrained_space_dual_norm_matches_sup() {
        // Nodal P1 mass matrix on 3 cells with trapezoid weights.
        let h = 1.0 / 3.0;
        let mut m = DMatrix::zeros(4, 4);
        for c in 0..3 {
            m[(c, c)] += 2.0 * h / 6.0;
            m[(c + 1, c + 1)] += 2.0 * h / 6.0;
            m[(c, c + 1)] += h / 6.0;
            m[(c + 1, c)] += h / 6.0;
        }
        let w = dvec(&[h / 2.0, h, h, h / 2.0]);
        let s = SpaceDescriptor::zero_mean("H", m, w).unwrap();
        assert_eq!(s.effective_dim(), 3);
        let f = dvec(&[0.3, -0.1, 0.7, 0.2]);
        let r = s.riesz(&f).unwrap();
        assert!(s.weighted_mean(&r).unwrap().abs() < 1e-14);
        // <r, v> = f(v) on admissible v
        let v = s.project(&dvec(&[1.0, 2.0, -1.0, 0.5])).unwrap();
        assert_abs_diff_eq!(s.inner(&r, &v).unwrap(), f.dot(&v), epsilon = 1e-13);
        assert_abs_diff_eq!(s.dual_norm(&f).unwrap(), s.norm(&r).unwrap(), epsilon = 1e-13);
        // adding a multiple of the weights does not change the functional
        let shifted = &f + s.weights().unwrap() * 3.0;
        assert_abs_diff_eq!(s.dual_norm(&shifted).unwrap(), s.dual_norm(&f).unwrap(), epsilon = 1e-13);
        assert!(s.project_dual(&f).unwrap().sum().abs() < 1e-15);
    }
}
