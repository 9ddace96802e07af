//! Elimination of the strongly monotone variable from a coupled system
//!
//! ```text
//! A(x, y) = x0*,   B(x, y) = y0*
//! ```
//!
//! with `A(x, y) = Ã(x, x, y)` and `B(x, y) = B̃(x, x, y)`. The map
//! `R̃(x1, x2)` solves `B̃(x1, x2, ·) = y0*`, and `S̃(x1, x2) = Ã(x1, x2, R̃(x1, x2))`.
//! The reduced operator is `S x = S̃(x, x)`.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::monotone::{
    solve_strongly_monotone, Method, MonotoneProblem, NewtonSolver, Operator, PairSampler,
    SolveError, SolveReport,
};
use crate::space::{DualVector, SpaceDescriptor, SpaceError};

/// `(x1, x2, y) -> dual`.
pub type CoupledFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DualVector + Send + Sync>;
/// `(x1, x2, y) -> dB̃/dy`.
pub type CoupledJacobian = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("inner solve did not converge: residual {:e} after {} iterations", .0.final_residual, .0.iterations)]
    InnerNotConverged(Box<SolveReport>),
    #[error("outer solve did not converge: residual {:e} after {} iterations", .0.final_residual, .0.iterations)]
    OuterNotConverged(Box<SolveReport>),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantsRecord {
    /// Strong monotonicity of `Ã` in its first argument.
    pub alpha_a: f64,
    /// Lipschitz constant of `Ã` in `y`.
    pub beta_a: f64,
    /// Strong monotonicity of `B̃` in `y`.
    pub alpha_b: f64,
    /// Lipschitz constant of `B̃` in its first argument.
    pub beta_b: f64,
    /// `alpha_a * alpha_b >= beta_a * beta_b`.
    pub a34_holds: bool,
}

impl ConstantsRecord {
    pub fn new(alpha_a: f64, beta_a: f64, alpha_b: f64, beta_b: f64) -> Self {
        Self { alpha_a, beta_a, alpha_b, beta_b, a34_holds: alpha_a * alpha_b >= beta_a * beta_b }
    }

    /// Lipschitz bound of `R̃` in its first argument, `beta_b / alpha_b`.
    pub fn r_lipschitz(&self) -> f64 {
        self.beta_b / self.alpha_b
    }

    /// Monotonicity bound of `S̃` in its first argument,
    /// `(alpha_a alpha_b - beta_a beta_b) / alpha_b`.
    pub fn s_monotonicity(&self) -> f64 {
        (self.alpha_a * self.alpha_b - self.beta_a * self.beta_b) / self.alpha_b
    }
}

#[derive(Clone)]
pub struct CoupledOperators {
    pub a_tilde: CoupledFn,
    pub b_tilde: CoupledFn,
    /// Exact `dB̃/dy`, used by the Newton inner solver when present.
    pub b_tilde_jacobian: Option<CoupledJacobian>,
    pub x_space: SpaceDescriptor,
    pub y_space: SpaceDescriptor,
    pub constants: ConstantsRecord,
    pub y0_star: DualVector,
    /// Lipschitz constant of `B̃` in `y`, needed by the Richardson inner solver.
    pub lipschitz_b_y: f64,
}

impl CoupledOperators {
    pub fn a(&self, x: &DVector<f64>, y: &DVector<f64>) -> DualVector {
        (self.a_tilde)(x, x, y)
    }

    pub fn b(&self, x: &DVector<f64>, y: &DVector<f64>) -> DualVector {
        (self.b_tilde)(x, x, y)
    }
}

/// Inner solver configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 100_000, method: Method::Richardson }
    }
}

struct InnerOperator<'a> {
    ops: &'a CoupledOperators,
    x1: &'a DVector<f64>,
    x2: &'a DVector<f64>,
}

impl Operator for InnerOperator<'_> {
    fn apply(&self, y: &DVector<f64>) -> DualVector {
        (self.ops.b_tilde)(self.x1, self.x2, y)
    }

    fn jacobian(&self, y: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.ops.b_tilde_jacobian.as_ref().map(|j| j(self.x1, self.x2, y))
    }
}

/// `R̃(x1, x2)` with an optional starting guess.
pub fn solve_r_from(
    ops: &CoupledOperators,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    settings: &InnerSettings,
    start: Option<&DVector<f64>>,
) -> Result<SolveReport, ReductionError> {
    ops.x_space.check_dim(x1)?;
    ops.x_space.check_dim(x2)?;
    let op = InnerOperator { ops, x1, x2 };
    let p = MonotoneProblem::new(
        &op,
        &ops.y_space,
        ops.constants.alpha_b,
        ops.lipschitz_b_y.max(ops.constants.alpha_b),
        ops.y0_star.clone(),
    )?;
    let zero = DVector::zeros(ops.y_space.dim());
    let init = start.unwrap_or(&zero);
    let report = match settings.method {
        Method::Richardson => solve_strongly_monotone(&p, init, settings.tol, settings.max_iter)?,
        Method::Newton => NewtonSolver::new(false).solve(&p, init, settings.tol, settings.max_iter)?,
    };
    if !report.converged {
        return Err(ReductionError::InnerNotConverged(Box::new(report)));
    }
    Ok(report)
}

/// `R̃(x1, x2)`, with `‖B̃(x1, x2, y) - y0*‖_* <= settings.tol`.
pub fn solve_r(
    ops: &CoupledOperators,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    settings: &InnerSettings,
) -> Result<DVector<f64>, ReductionError> {
    Ok(solve_r_from(ops, x1, x2, settings, None)?.solution)
}

/// Value of `S̃(x1, x2)` together with the effect of the inexact inner solve.
#[derive(Clone, Debug)]
pub struct STildeValue {
    pub value: DualVector,
    pub y: DVector<f64>,
    /// `beta_a * inner_residual / alpha_b`, a bound on the dual-norm error of `value`.
    pub error_bound: f64,
    pub inner: SolveReport,
}

fn s_tilde_from(
    ops: &CoupledOperators,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    inner: SolveReport,
) -> STildeValue {
    let value = (ops.a_tilde)(x1, x2, &inner.solution);
    let c = &ops.constants;
    STildeValue {
        value,
        y: inner.solution.clone(),
        error_bound: c.beta_a * inner.final_residual / c.alpha_b,
        inner,
    }
}

pub fn apply_s_tilde(
    ops: &CoupledOperators,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    settings: &InnerSettings,
) -> Result<STildeValue, ReductionError> {
    let inner = solve_r_from(ops, x1, x2, settings, None)?;
    Ok(s_tilde_from(ops, x1, x2, inner))
}

/// `x -> S̃(x, x)`, reusing the previous inner solution as a starting guess.
pub struct ReducedOperator {
    pub ops: CoupledOperators,
    pub settings: InnerSettings,
    pub warm_start: bool,
    last: Mutex<Option<DVector<f64>>>,
}

impl ReducedOperator {
    pub fn new(ops: CoupledOperators, settings: InnerSettings) -> Self {
        Self { ops, settings, warm_start: true, last: Mutex::new(None) }
    }

    pub fn cold(ops: CoupledOperators, settings: InnerSettings) -> Self {
        Self { warm_start: false, ..Self::new(ops, settings) }
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<STildeValue, ReductionError> {
        let start = if self.warm_start { self.last.lock().expect("cache lock").clone() } else { None };
        let inner = solve_r_from(&self.ops, x, x, &self.settings, start.as_ref())?;
        if self.warm_start {
            *self.last.lock().expect("cache lock") = Some(inner.solution.clone());
        }
        Ok(s_tilde_from(&self.ops, x, x, inner))
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DualVector, ReductionError> {
        Ok(self.evaluate(x)?.value)
    }

    /// `y = R x` for the current tolerances.
    pub fn recover_y(&self, x: &DVector<f64>) -> Result<DVector<f64>, ReductionError> {
        Ok(self.evaluate(x)?.y)
    }
}

/// Outer solver configuration for [`solve_reduced`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
    /// Lipschitz bound of `S`, required by the Richardson path.
    pub lipschitz: f64,
}

/// Solves `S x = x_star`. The strong monotonicity constant handed to the
/// solver is `s_monotonicity()` of the constants record.
pub fn solve_reduced(
    reduced: &ReducedOperator,
    x_star: &DualVector,
    x_init: &DVector<f64>,
    settings: &OuterSettings,
) -> Result<SolveReport, ReductionError> {
    let failure: Mutex<Option<ReductionError>> = Mutex::new(None);
    let op = |x: &DVector<f64>| match reduced.apply(x) {
        Ok(v) => v,
        Err(e) => {
            failure.lock().expect("failure lock").get_or_insert(e);
            DVector::from_element(x.len(), f64::NAN)
        }
    };
    let alpha = reduced.ops.constants.s_monotonicity();
    let p = MonotoneProblem::new(
        &op,
        &reduced.ops.x_space,
        alpha,
        settings.lipschitz.max(alpha),
        x_star.clone(),
    )?;
    let result = match settings.method {
        Method::Richardson => solve_strongly_monotone(&p, x_init, settings.tol, settings.max_iter),
        Method::Newton => NewtonSolver::new(false).solve(&p, x_init, settings.tol, settings.max_iter),
    };
    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    let report = result?;
    if !report.converged {
        return Err(ReductionError::OuterNotConverged(Box::new(report)));
    }
    Ok(report)
}

/// `(‖A(x, y) - x0*‖_*, ‖B(x, y) - y0*‖_*)`.
pub fn check_coupled_residual(
    ops: &CoupledOperators,
    x: &DVector<f64>,
    y: &DVector<f64>,
    x0_star: &DualVector,
) -> Result<(f64, f64), SpaceError> {
    let ra = ops.x_space.dual_norm(&(ops.a(x, y) - x0_star))?;
    let rb = ops.y_space.dual_norm(&(ops.b(x, y) - &ops.y0_star))?;
    Ok((ra, rb))
}

/// `u -> T(u - x0)`.
pub struct Translated<T> {
    pub inner: T,
    pub shift: DVector<f64>,
}

pub fn translate<T: Operator>(op: T, x0: DVector<f64>) -> Translated<T> {
    Translated { inner: op, shift: x0 }
}

impl<T: Operator> Operator for Translated<T> {
    fn apply(&self, u: &DVector<f64>) -> DualVector {
        self.inner.apply(&(u - &self.shift))
    }

    fn jacobian(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.jacobian(&(u - &self.shift))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub samples: usize,
    /// Largest `‖R̃(x1,x) - R̃(x2,x)‖ / ‖x1 - x2‖` seen.
    pub worst_r_ratio: f64,
    pub r_bound: f64,
    /// Smallest `<S̃(x1,x) - S̃(x2,x), x1 - x2> / ‖x1 - x2‖^2` seen.
    pub worst_s_ratio: f64,
    pub s_bound: f64,
    /// Largest allowance applied to a single sample, from the inner tolerance.
    pub band: f64,
    pub r_pass: bool,
    pub s_pass: bool,
}

impl EstimateReport {
    pub fn passes(&self) -> bool {
        self.r_pass && self.s_pass
    }
}

/// Samples both Lipschitz/monotonicity estimates of `R̃` and `S̃` in their
/// first argument, with the second argument equal to the second sample point.
/// A sample passes when it is within its bound plus ten times the error
/// propagated from the inner solves.
pub fn verify_reduction_estimates(
    ops: &CoupledOperators,
    sampler: &mut PairSampler,
    n: usize,
    settings: &InnerSettings,
) -> Result<EstimateReport, ReductionError> {
    let c = ops.constants;
    let mut rep = EstimateReport {
        samples: n,
        worst_r_ratio: 0.0,
        r_bound: c.r_lipschitz(),
        worst_s_ratio: f64::INFINITY,
        s_bound: c.s_monotonicity(),
        band: 0.0,
        r_pass: true,
        s_pass: true,
    };
    for _ in 0..n {
        let (x1, x2) = sampler.pair(&ops.x_space);
        let s1 = apply_s_tilde(ops, &x1, &x2, settings)?;
        let s2 = apply_s_tilde(ops, &x2, &x2, settings)?;
        let d = &x1 - &x2;
        let dn = ops.x_space.norm(&d)?;
        let res = s1.inner.final_residual + s2.inner.final_residual;

        let r_ratio = ops.y_space.norm(&(&s1.y - &s2.y))? / dn;
        let r_band = 10.0 * res / (c.alpha_b * dn);
        let s_ratio = (&s1.value - &s2.value).dot(&d) / (dn * dn);
        let s_band = 10.0 * (s1.error_bound + s2.error_bound) / dn;
        let scale = 1e-12 * r_ratio.abs().max(s_ratio.abs()).max(1.0);
        rep.band = rep.band.max(r_band.max(s_band));

        rep.worst_r_ratio = rep.worst_r_ratio.max(r_ratio);
        rep.worst_s_ratio = rep.worst_s_ratio.min(s_ratio);
        if r_ratio > rep.r_bound + r_band + scale {
            rep.r_pass = false;
        }
        if s_ratio < rep.s_bound - s_band - scale {
            rep.s_pass = false;
        }
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct S1Report {
    pub samples: usize,
    /// Smallest `<S̃(x,x) - S̃(y,x), x - y>` seen.
    pub min_value: f64,
    pub threshold: f64,
    pub passes: bool,
}

/// Samples monotonicity of `S̃` in its first argument at fixed second
/// argument: `<S̃(x,x) - S̃(y,x), x - y> >= 0` up to ten times the
/// propagated inner tolerance.
pub fn check_s1(
    ops: &CoupledOperators,
    sampler: &mut PairSampler,
    n: usize,
    settings: &InnerSettings,
) -> Result<S1Report, ReductionError> {
    let mut min_value = f64::INFINITY;
    let mut threshold = 0.0f64;
    let mut passes = true;
    for _ in 0..n {
        let (x, y) = sampler.pair(&ops.x_space);
        let sx = apply_s_tilde(ops, &x, &x, settings)?;
        let sy = apply_s_tilde(ops, &y, &x, settings)?;
        let d = &x - &y;
        let v = (&sx.value - &sy.value).dot(&d);
        let dn = ops.x_space.norm(&d)?;
        let band = 10.0 * (sx.error_bound + sy.error_bound) * dn + 1e-12 * v.abs();
        threshold = threshold.max(band);
        min_value = min_value.min(v);
        if v < -band {
            passes = false;
        }
    }
    Ok(S1Report { samples: n, min_value, threshold: -threshold, passes })
}

/// Distances `‖S̃(x + t d, x) - S̃(x, x)‖_*` for `t = 10^-1, ..., 10^-steps`.
/// For a continuous `S̃` the sequence tends to zero.
pub fn continuity_spot_check(
    ops: &CoupledOperators,
    x: &DVector<f64>,
    direction: &DVector<f64>,
    steps: usize,
    settings: &InnerSettings,
) -> Result<Vec<f64>, ReductionError> {
    let base = apply_s_tilde(ops, x, x, settings)?.value;
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        let t = 10f64.powi(-(k as i32));
        let moved = x + direction * t;
        let v = apply_s_tilde(ops, &moved, x, settings)?.value;
        out.push(ops.x_space.dual_norm(&(v - &base))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::scalar_closed_form;
    use approx::assert_abs_diff_eq;

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn tight() -> InnerSettings {
        InnerSettings { tol: 1e-14, ..Default::default() }
    }

    #[test]
    fn scalar_r_and_s() {
        let ops = scalar_closed_form();
        let y = solve_r(&ops, &s(2.0), &s(2.0), &tight()).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-13);
        let v = apply_s_tilde(&ops, &s(2.0), &s(2.0), &tight()).unwrap();
        assert_abs_diff_eq!(v.value[0], 5.0, epsilon = 1e-13);
        assert!(v.error_bound <= 0.5 * 1e-14);
        assert_abs_diff_eq!(ops.constants.s_monotonicity(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn independent_inner_problem() {
        let mut ops = scalar_closed_form();
        ops.b_tilde = Arc::new(|_, _, y| y.clone());
        ops.y0_star = s(0.0);
        ops.lipschitz_b_y = 1.0;
        ops.constants = ConstantsRecord::new(2.0, 1.0, 1.0, 0.0);
        for x in [-3.0, 0.0, 7.5] {
            let y = solve_r(&ops, &s(x), &s(x), &tight()).unwrap();
            assert_eq!(y[0], 0.0);
        }
    }

    #[test]
    fn decoupled_s_equals_a() {
        let mut ops = scalar_closed_form();
        ops.a_tilde = Arc::new(|x1, x2, _| x1 * 3.0 + x2.map(f64::tanh));
        for x in [-1.0, 0.3, 4.0] {
            let v = apply_s_tilde(&ops, &s(x), &s(x), &tight()).unwrap();
            assert_eq!(v.value[0], 3.0 * x + x.tanh());
        }
    }

    #[test]
    fn coupled_residual_examples() {
        let ops = scalar_closed_form();
        let (ra, rb) = check_coupled_residual(&ops, &s(2.0), &s(1.0), &s(5.0)).unwrap();
        assert_eq!((ra, rb), (0.0, 0.0));
        let delta = 0.125;
        let (_, rb) = check_coupled_residual(&ops, &s(2.0), &s(1.0 + delta), &s(5.0)).unwrap();
        assert_abs_diff_eq!(rb, 2.0 * delta, epsilon = 1e-15);
    }

    #[test]
    fn translation_examples() {
        let id = |u: &DVector<f64>| u.clone();
        let t = translate(id, DVector::from_vec(vec![1.0, 1.0]));
        let u = DVector::from_vec(vec![0.5, -2.0]);
        assert_eq!(t.apply(&u), DVector::from_vec(vec![-0.5, -3.0]));
        let t0 = translate(id, DVector::zeros(2));
        assert_eq!(t0.apply(&u), u);
    }

    #[test]
    fn scalar_estimates_saturate() {
        let ops = scalar_closed_form();
        let mut sampler = PairSampler::new(3, 1.0);
        let rep = verify_reduction_estimates(&ops, &mut sampler, 200, &tight()).unwrap();
        assert!(rep.passes());
        assert_abs_diff_eq!(rep.worst_r_ratio, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.worst_s_ratio, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn overstated_constants_fail() {
        let mut ops = scalar_closed_form();
        ops.constants = ConstantsRecord::new(4.0, 1.0, 2.0, 1.0);
        let mut sampler = PairSampler::new(3, 1.0);
        let rep = verify_reduction_estimates(&ops, &mut sampler, 50, &tight()).unwrap();
        assert!(rep.r_pass);
        assert!(!rep.s_pass);
    }

    #[test]
    fn s1_on_scalar() {
        let ops = scalar_closed_form();
        let mut sampler = PairSampler::new(11, 1.0);
        let rep = check_s1(&ops, &mut sampler, 100, &tight()).unwrap();
        assert!(rep.passes);
        assert!(rep.min_value > 0.0);
    }

    #[test]
    fn s1_constant_in_first_argument() {
        let mut ops = scalar_closed_form();
        ops.a_tilde = Arc::new(|_, x2, y| x2 + y);
        ops.b_tilde = Arc::new(|_, x2, y| x2 + y * 2.0);
        let mut sampler = PairSampler::new(11, 1.0);
        let rep = check_s1(&ops, &mut sampler, 50, &tight()).unwrap();
        assert_eq!(rep.min_value, 0.0);
    }

    #[test]
    fn inner_failure_is_reported() {
        let ops = scalar_closed_form();
        let settings = InnerSettings { tol: 1e-14, max_iter: 0, method: Method::Richardson };
        let err = solve_r(&ops, &s(2.0), &s(2.0), &settings).unwrap_err();
        assert!(matches!(err, ReductionError::InnerNotConverged(_)));
    }

    #[test]
    fn continuity_along_ray() {
        let ops = scalar_closed_form();
        let d = continuity_spot_check(&ops, &s(1.0), &s(1.0), 6, &tight()).unwrap();
        assert!(d.windows(2).all(|w| w[1] < w[0]));
        assert!(d[5] < 1e-5);
    }

    #[test]
    fn solve_reduced_scalar() {
        let ops = scalar_closed_form();
        let reduced = ReducedOperator::new(ops.clone(), tight());
        let settings = OuterSettings { tol: 1e-12, max_iter: 1000, method: Method::Richardson, lipschitz: 1.5 };
        let rep = solve_reduced(&reduced, &s(5.0), &s(0.0), &settings).unwrap();
        assert_abs_diff_eq!(rep.solution[0], 2.0, epsilon = 1e-11);
        let y = reduced.recover_y(&rep.solution).unwrap();
        let (ra, rb) = check_coupled_residual(&ops, &rep.solution, &y, &s(5.0)).unwrap();
        assert!(ra < 1e-11 && rb < 1e-11);
    }
}
