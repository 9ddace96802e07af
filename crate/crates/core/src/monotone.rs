//! Solvers and empirical constant estimates for strongly monotone operators.
//!
//! The reference method is the damped Richardson (Zarantonello) iteration
//! `y <- y - tau G^{-1} (B(y) - f)` with `tau = alpha / L^2`, which contracts
//! the error by at least `q = sqrt(1 - alpha^2 / L^2)` per step. A Newton
//! iteration is available for stiff problems where `q` is close to one.

use nalgebra::{DMatrix, DVector, LU, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::space::{DualVector, SpaceDescriptor, SpaceError};

/// A (possibly nonlinear) map from primal coordinates to dual coordinates.
pub trait Operator: Send + Sync {
    fn apply(&self, x: &DVector<f64>) -> DualVector;

    /// Exact Jacobian, if the operator knows it. Newton falls back to
    /// forward differences otherwise.
    fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

impl<F> Operator for F
where
    F: Fn(&DVector<f64>) -> DualVector + Send + Sync,
{
    fn apply(&self, x: &DVector<f64>) -> DualVector {
        self(x)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid constants: alpha = {alpha}, lipschitz = {lipschitz} (need 0 < alpha <= lipschitz)")]
    InvalidConstants { alpha: f64, lipschitz: f64 },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("operator returned a non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("iteration diverged (residual {residual:e} after {iteration} iterations); check the monotonicity hypotheses")]
    Diverged { iteration: usize, residual: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Equation `B(y) = rhs` on `space`, with `B` strongly monotone (constant
/// `alpha`) and Lipschitz (constant `lipschitz`) in the norm of `space`.
pub struct MonotoneProblem<'a, O: Operator + ?Sized> {
    pub operator: &'a O,
    pub alpha: f64,
    pub lipschitz: f64,
    pub rhs: DualVector,
    pub space: &'a SpaceDescriptor,
}

impl<'a, O: Operator + ?Sized> MonotoneProblem<'a, O> {
    pub fn new(
        operator: &'a O,
        space: &'a SpaceDescriptor,
        alpha: f64,
        lipschitz: f64,
        rhs: DualVector,
    ) -> Result<Self, SolveError> {
        if !(alpha > 0.0) || !(lipschitz >= alpha) || !lipschitz.is_finite() {
            return Err(SolveError::InvalidConstants { alpha, lipschitz });
        }
        space.check_dim(&rhs)?;
        Ok(Self { operator, alpha, lipschitz, rhs, space })
    }

    /// Per-step error contraction factor of the Richardson iteration.
    pub fn contraction(&self) -> f64 {
        (1.0 - (self.alpha / self.lipschitz).powi(2)).max(0.0).sqrt()
    }

    fn residual(&self, y: &DVector<f64>, iteration: usize) -> Result<(DualVector, f64), SolveError> {
        let r = self.operator.apply(y) - &self.rhs;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { iteration });
        }
        let norm = self.space.dual_norm(&r)?;
        Ok((r, norm))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub iterations: usize,
    /// Dual norm of `B(y) - rhs` at the returned point.
    pub final_residual: f64,
    pub converged: bool,
    /// `sqrt(1 - alpha^2 / L^2)`.
    pub contraction_estimate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Richardson,
    Newton,
}

fn check_tol(tol: f64) -> Result<(), SolveError> {
    if !(tol > 0.0) {
        return Err(SolveError::InvalidTolerance(tol));
    }
    Ok(())
}

/// Damped Richardson iteration with step `alpha / L^2`, preconditioned by the
/// Riesz map of the space. Running out of iterations is reported through
/// `converged = false`, not as an error.
pub fn solve_strongly_monotone<O: Operator + ?Sized>(
    p: &MonotoneProblem<'_, O>,
    y_init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    check_tol(tol)?;
    p.space.check_dim(y_init)?;
    let tau = p.alpha / (p.lipschitz * p.lipschitz);
    let mut y = p.space.project(y_init)?;
    let (mut r, mut res) = p.residual(&y, 0)?;
    let initial = res;
    let mut iterations = 0;
    while res > tol && iterations < max_iter {
        let step = p.space.riesz(&r)?;
        y -= step * tau;
        iterations += 1;
        (r, res) = p.residual(&y, iterations)?;
        if res > 1e12 * initial.max(tol) {
            return Err(SolveError::Diverged { iteration: iterations, residual: res });
        }
    }
    Ok(SolveReport {
        solution: y,
        iterations,
        final_residual: res,
        converged: res <= tol,
        contraction_estimate: p.contraction(),
    })
}

/// Newton iteration on the admissible subspace.
///
/// With `reuse_jacobian` the factorized Jacobian is kept between calls and
/// only refreshed when the residual stops contracting fast enough (a chord
/// method). No line search is performed.
#[derive(Default)]
pub struct NewtonSolver {
    pub reuse_jacobian: bool,
    cached: Option<LU<f64, Dyn, Dyn>>,
    /// Number of Jacobian evaluations so far.
    pub jacobian_evaluations: usize,
}

impl NewtonSolver {
    pub fn new(reuse_jacobian: bool) -> Self {
        Self { reuse_jacobian, cached: None, jacobian_evaluations: 0 }
    }

    /// Drops a cached Jacobian.
    pub fn invalidate(&mut self) {
        self.cached = None;
    }

    fn reduced_jacobian<O: Operator + ?Sized>(
        &mut self,
        p: &MonotoneProblem<'_, O>,
        y: &DVector<f64>,
        basis: &DMatrix<f64>,
        base: &DualVector,
    ) -> DMatrix<f64> {
        self.jacobian_evaluations += 1;
        if let Some(j) = p.operator.jacobian(y) {
            return basis.transpose() * j * basis;
        }
        let k = basis.ncols();
        let scale = y.amax().max(1.0);
        let eps = f64::EPSILON.sqrt() * scale;
        let mut cols = DMatrix::zeros(y.len(), k);
        for j in 0..k {
            let shifted = y + basis.column(j) * eps;
            let diff = (p.operator.apply(&shifted) - base) / eps;
            cols.set_column(j, &diff);
        }
        basis.transpose() * cols
    }

    pub fn solve<O: Operator + ?Sized>(
        &mut self,
        p: &MonotoneProblem<'_, O>,
        y_init: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<SolveReport, SolveError> {
        check_tol(tol)?;
        p.space.check_dim(y_init)?;
        let basis = p.space.basis();
        let mut y = p.space.project(y_init)?;
        let (mut r, mut res) = p.residual(&y, 0)?;
        let initial = res;
        let mut iterations = 0;
        let mut fresh = false;
        if !self.reuse_jacobian {
            self.cached = None;
        }
        while res > tol && iterations < max_iter {
            if self.cached.is_none() {
                let base = p.operator.apply(&y);
                let j = self.reduced_jacobian(p, &y, &basis, &base);
                self.cached = Some(j.lu());
                fresh = true;
            }
            let lu = self.cached.as_ref().expect("jacobian present");
            let rhs = -basis.tr_mul(&r);
            let delta = lu.solve(&rhs).ok_or(SolveError::SingularJacobian { iteration: iterations })?;
            y += &basis * delta;
            iterations += 1;
            let prev = res;
            (r, res) = p.residual(&y, iterations)?;
            if res > 1e12 * initial.max(tol) {
                return Err(SolveError::Diverged { iteration: iterations, residual: res });
            }
            if res > 0.25 * prev {
                if fresh && res >= prev && iterations >= 3 {
                    // Stagnation: a fresh Jacobian no longer reduces the residual.
                    break;
                }
                self.cached = None;
            }
            if !self.reuse_jacobian {
                self.cached = None;
            }
            fresh = false;
        }
        Ok(SolveReport {
            solution: y,
            iterations,
            final_residual: res,
            converged: res <= tol,
            contraction_estimate: p.contraction(),
        })
    }
}

/// Dispatches to Richardson or (non-reusing) Newton.
pub fn solve<O: Operator + ?Sized>(
    p: &MonotoneProblem<'_, O>,
    y_init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    method: Method,
) -> Result<SolveReport, SolveError> {
    match method {
        Method::Richardson => solve_strongly_monotone(p, y_init, tol, max_iter),
        Method::Newton => NewtonSolver::new(false).solve(p, y_init, tol, max_iter),
    }
}

/// Seeded source of random vectors and vector pairs.
///
/// Each sample is a standard normal vector scaled by an amplitude drawn
/// log-uniformly from `[scale * 1e-2, scale * 1e1]`, projected onto the
/// admissible subspace of the target space.
#[derive(Clone, Debug)]
pub struct PairSampler {
    rng: ChaCha8Rng,
    scale: f64,
}

impl PairSampler {
    pub fn new(seed: u64, scale: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), scale }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn vector(&mut self, space: &SpaceDescriptor) -> DVector<f64> {
        let log_amp: f64 = self.rng.random_range(-2.0..1.0);
        let amp = self.scale * 10f64.powf(log_amp);
        let raw = DVector::from_fn(space.dim(), |_, _| {
            let z: f64 = self.rng.sample(StandardNormal);
            z * amp
        });
        space.project(&raw).expect("sampler dimension matches space")
    }

    /// Two admissible vectors with `|y1 - y2| >= 1e-12` (resampled otherwise).
    pub fn pair(&mut self, space: &SpaceDescriptor) -> (DVector<f64>, DVector<f64>) {
        loop {
            let a = self.vector(space);
            let b = self.vector(space);
            let d = space.norm(&(&a - &b)).expect("dimension");
            if d >= 1e-12 {
                return (a, b);
            }
        }
    }
}

/// Smallest sampled monotonicity quotient `<B y1 - B y2, y1 - y2> / |y1 - y2|^2`;
/// an upper bound on the true strong-monotonicity constant.
pub fn estimate_monotonicity<O: Operator + ?Sized>(
    op: &O,
    space: &SpaceDescriptor,
    sampler: &mut PairSampler,
    n: usize,
) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..n.max(1) {
        let (a, b) = sampler.pair(space);
        let d = &a - &b;
        let num = (op.apply(&a) - op.apply(&b)).dot(&d);
        let den = space.norm(&d).expect("dimension").powi(2);
        best = best.min(num / den);
    }
    best
}

/// Largest sampled Lipschitz quotient `|B y1 - B y2|_* / |y1 - y2|`; a lower
/// bound on the true Lipschitz constant.
pub fn estimate_lipschitz<O: Operator + ?Sized>(
    op: &O,
    space: &SpaceDescriptor,
    sampler: &mut PairSampler,
    n: usize,
) -> f64 {
    let mut best = 0.0f64;
    for _ in 0..n.max(1) {
        let (a, b) = sampler.pair(space);
        let d = &a - &b;
        let num = space.dual_norm(&(op.apply(&a) - op.apply(&b))).expect("dimension");
        let den = space.norm(&d).expect("dimension");
        best = best.max(num / den);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// Scalar Newton on `y + 0.5 tanh(y) = c`, iterated to machine precision.
    fn newton_oracle(c: f64) -> f64 {
        let mut y = c;
        for _ in 0..100 {
            let t = y.tanh();
            let f = y + 0.5 * t - c;
            let df = 1.0 + 0.5 * (1.0 - t * t);
            y -= f / df;
        }
        y
    }

    #[test]
    fn linear_diagonal() {
        let s = SpaceDescriptor::euclidean("Y", 2).unwrap();
        let op = |y: &DVector<f64>| y * 2.0;
        let p = MonotoneProblem::new(&op, &s, 2.0, 2.0, dvec(&[4.0, 0.0])).unwrap();
        let rep = solve_strongly_monotone(&p, &DVector::zeros(2), 1e-12, 100).unwrap();
        assert!(rep.converged);
        assert_abs_diff_eq!(rep.solution[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.solution[1], 0.0, epsilon = 1e-12);
        assert!(rep.final_residual < 1e-12);
    }

    #[test]
    fn root_at_origin() {
        let s = SpaceDescriptor::euclidean("Y", 3).unwrap();
        let op = |y: &DVector<f64>| y.clone();
        let p = MonotoneProblem::new(&op, &s, 1.0, 1.0, DVector::zeros(3)).unwrap();
        let rep = solve_strongly_monotone(&p, &dvec(&[5.0, -2.0, 1.0]), 1e-12, 10).unwrap();
        assert!(rep.solution.amax() < 1e-12);
    }

    #[test]
    fn tanh_perturbation_matches_newton_oracle() {
        let s = SpaceDescriptor::euclidean("Y", 4).unwrap();
        let op = |y: &DVector<f64>| y + y.map(f64::tanh) * 0.5;
        let rhs = dvec(&[1.2, -0.4, 3.0, 0.0]);
        let p = MonotoneProblem::new(&op, &s, 1.0, 1.5, rhs.clone()).unwrap();
        let rep = solve_strongly_monotone(&p, &DVector::zeros(4), 1e-13, 10_000).unwrap();
        assert!(rep.converged);
        for i in 0..4 {
            assert_abs_diff_eq!(rep.solution[i], newton_oracle(rhs[i]), epsilon = 1e-10);
        }
        let newton = solve(&p, &DVector::zeros(4), 1e-13, 50, Method::Newton).unwrap();
        assert!(newton.converged);
        assert!(newton.iterations < 10);
        for i in 0..4 {
            assert_abs_diff_eq!(newton.solution[i], newton_oracle(rhs[i]), epsilon = 1e-10);
        }
    }

    #[test]
    fn exhausted_iterations_are_not_errors() {
        let s = SpaceDescriptor::euclidean("Y", 2).unwrap();
        let op = |y: &DVector<f64>| y + y.map(f64::tanh) * 0.5;
        let p = MonotoneProblem::new(&op, &s, 1.0, 1.5, dvec(&[1.0, 2.0])).unwrap();
        let rep = solve_strongly_monotone(&p, &DVector::zeros(2), 1e-14, 2).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
    }

    #[test]
    fn nan_output_is_an_error() {
        let s = SpaceDescriptor::euclidean("Y", 2).unwrap();
        let op = |y: &DVector<f64>| y.map(|v| if v > 0.5 { f64::NAN } else { v });
        let p = MonotoneProblem::new(&op, &s, 1.0, 1.0, dvec(&[1.0, 0.0])).unwrap();
        let err = solve_strongly_monotone(&p, &DVector::zeros(2), 1e-12, 10).unwrap_err();
        assert!(matches!(err, SolveError::NonFinite { .. }));
    }

    #[test]
    fn invalid_constants_rejected() {
        let s = SpaceDescriptor::euclidean("Y", 1).unwrap();
        let op = |y: &DVector<f64>| y.clone();
        assert!(MonotoneProblem::new(&op, &s, 0.0, 1.0, dvec(&[0.0])).is_err());
        assert!(MonotoneProblem::new(&op, &s, 2.0, 1.0, dvec(&[0.0])).is_err());
        let p = MonotoneProblem::new(&op, &s, 1.0, 1.0, dvec(&[0.0])).unwrap();
        assert!(matches!(
            solve_strongly_monotone(&p, &dvec(&[0.0]), 0.0, 1),
            Err(SolveError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn constant_estimates() {
        let s = SpaceDescriptor::euclidean("Y", 2).unwrap();
        let mut sampler = PairSampler::new(7, 1.0);
        let three = |y: &DVector<f64>| y * 3.0;
        assert_abs_diff_eq!(estimate_monotonicity(&three, &s, &mut sampler, 50), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_lipschitz(&three, &s, &mut sampler, 50), 3.0, epsilon = 1e-12);

        let diag = |y: &DVector<f64>| dvec(&[y[0], 5.0 * y[1]]);
        let m = estimate_monotonicity(&diag, &s, &mut sampler, 5000);
        let l = estimate_lipschitz(&diag, &s, &mut sampler, 5000);
        assert!((1.0..1.01).contains(&m), "m = {m}");
        assert!(l <= 5.0 + 1e-12 && l > 4.99, "l = {l}");

        let ytanh = |y: &DVector<f64>| y + y.map(f64::tanh);
        let m = estimate_monotonicity(&ytanh, &s, &mut sampler, 5000);
        assert!((1.0..=2.0).contains(&m));
        assert!(m < 1.1, "large-amplitude samples push toward 1, got {m}");

        let tanh = |y: &DVector<f64>| y.map(f64::tanh);
        let l = estimate_lipschitz(&tanh, &s, &mut sampler, 5000);
        assert!(l <= 1.0 && l > 0.99, "l = {l}");
    }

    #[test]
    fn newton_on_constrained_space() {
        let w = dvec(&[0.5, 1.0, 1.0, 0.5]);
        let g = DMatrix::identity(4, 4);
        let s = SpaceDescriptor::zero_mean("Z", g, w.clone()).unwrap();
        let op = move |y: &DVector<f64>| y * 2.0 + y.map(f64::tanh);
        let rhs = s.project_dual(&dvec(&[1.0, -2.0, 0.5, 0.3])).unwrap();
        let p = MonotoneProblem::new(&op, &s, 2.0, 3.0, rhs).unwrap();
        let rep = NewtonSolver::new(false).solve(&p, &DVector::zeros(4), 1e-13, 30).unwrap();
        assert!(rep.converged);
        assert!(s.weighted_mean(&rep.solution).unwrap().abs() < 1e-15);
    }
}
