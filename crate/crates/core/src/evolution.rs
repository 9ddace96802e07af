//! Implicit Euler time stepping for `(E u)' + A u + B(t, u) = f` on a
//! finite-dimensional space `V`, where `E = Kᵀ G_H K` may be singular.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::monotone::{
    solve_strongly_monotone, Method, MonotoneProblem, NewtonSolver, Operator, SolveError, SolveReport,
};
use crate::space::{DualVector, SpaceDescriptor, SpaceError};

pub type TimeOperator = Arc<dyn Fn(f64, &DVector<f64>) -> DualVector + Send + Sync>;
pub type Forcing = Arc<dyn Fn(f64) -> DualVector + Send + Sync>;
pub type Functional = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("step {step} (t = {t}) failed: {source}")]
    Step {
        step: usize,
        t: f64,
        source: SolveError,
        partial: Box<Trajectory>,
    },
    #[error("step {step} (t = {t}) did not converge: residual {:e} after {} iterations", .report.final_residual, .report.iterations)]
    NotConverged {
        step: usize,
        t: f64,
        report: Box<SolveReport>,
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

impl EvolutionError {
    /// Steps completed before the failure, if any.
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            Self::Step { partial, .. } | Self::NotConverged { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionSpaces {
    pub v: SpaceDescriptor,
    pub h: SpaceDescriptor,
    /// Coordinates of `K: V -> H`.
    pub kmap: DMatrix<f64>,
    /// `Kᵀ G_H K`.
    pub e: DMatrix<f64>,
    pub e2: Option<DMatrix<f64>>,
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

impl EvolutionSpaces {
    pub fn new(v: SpaceDescriptor, h: SpaceDescriptor, kmap: DMatrix<f64>) -> Result<Self, EvolutionError> {
        if kmap.nrows() != h.dim() || kmap.ncols() != v.dim() {
            return Err(EvolutionError::Invalid(format!(
                "K has shape {}x{}, expected {}x{}",
                kmap.nrows(),
                kmap.ncols(),
                h.dim(),
                v.dim()
            )));
        }
        let e = kmap.transpose() * h.gram() * &kmap;
        let e = (&e + e.transpose()) * 0.5;
        Ok(Self { v, h, kmap, e, e2: None })
    }

    /// Uses a separately assembled `E`, which must agree with `Kᵀ G_H K` to
    /// `tol` in relative Frobenius norm.
    pub fn with_operator(
        v: SpaceDescriptor,
        h: SpaceDescriptor,
        kmap: DMatrix<f64>,
        e: DMatrix<f64>,
        tol: f64,
    ) -> Result<Self, EvolutionError> {
        let mut s = Self::new(v, h, kmap)?;
        let asym = rel_diff(&e, &e.transpose());
        if asym > 1e-12 {
            return Err(EvolutionError::Space(SpaceError::NotSymmetric { label: "E".into(), asymmetry: asym }));
        }
        let d = rel_diff(&e, &s.e);
        if d > tol {
            return Err(EvolutionError::Invalid(format!("E differs from K^T G_H K by {d:e} (relative)")));
        }
        s.e = e;
        Ok(s)
    }

    /// `‖K u‖_H`.
    pub fn k_norm(&self, u: &DVector<f64>) -> Result<f64, SpaceError> {
        self.h.norm(&(&self.kmap * u))
    }

    /// `⟨E u, u⟩`.
    pub fn energy(&self, u: &DVector<f64>) -> f64 {
        (&self.e * u).dot(u)
    }
}

#[derive(Clone)]
pub struct EvolutionProblem {
    pub spaces: EvolutionSpaces,
    pub a_mono: Arc<dyn Operator>,
    pub b_t: TimeOperator,
    pub f: Forcing,
    pub u0: DVector<f64>,
    pub t_end: f64,
    pub n_steps: usize,
    /// Lower bound on the monotonicity constant of `A + B(t, ·)` (may be 0).
    pub alpha_hint: f64,
    /// Upper bound on the Lipschitz constant of `A + B(t, ·)`.
    pub lipschitz_hint: f64,
    pub method: Method,
    /// `Q(u)`, recorded as a diagnostic when present.
    pub potential: Option<Functional>,
}

impl EvolutionProblem {
    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    fn validate(&self) -> Result<(), EvolutionError> {
        if !(self.t_end > 0.0) || self.n_steps == 0 {
            return Err(EvolutionError::Invalid(format!(
                "need t_end > 0 and n_steps >= 1, got {} and {}",
                self.t_end, self.n_steps
            )));
        }
        self.spaces.v.check_dim(&self.u0)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Weighted mean of each state (zero for constrained spaces).
    pub mass: Vec<f64>,
    /// `Q(u)`, or NaN when the problem has no potential.
    pub potential: Vec<f64>,
    pub step_residual: Vec<f64>,
    pub inner_iterations: Vec<usize>,
}

impl Trajectory {
    fn push(&mut self, p: &EvolutionProblem, t: f64, u: DVector<f64>, residual: f64, iters: usize) {
        self.mass.push(p.spaces.v.weighted_mean(&u).unwrap_or(0.0));
        self.potential.push(p.potential.as_ref().map_or(f64::NAN, |q| q(&u)));
        self.times.push(t);
        self.states.push(u);
        self.step_residual.push(residual);
        self.inner_iterations.push(iters);
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds the initial state")
    }
}

struct StepOperator<'a> {
    p: &'a EvolutionProblem,
    u_n: &'a DVector<f64>,
    t: f64,
    inv_dt: f64,
}

impl Operator for StepOperator<'_> {
    fn apply(&self, u: &DVector<f64>) -> DualVector {
        &self.p.spaces.e * (u - self.u_n) * self.inv_dt + self.p.a_mono.apply(u) + (self.p.b_t)(self.t, u)
    }
}

/// Reusable step solver. With Newton, the factorized Jacobian is carried
/// from one step to the next and refreshed only when it stops paying off.
pub struct Stepper<'a> {
    p: &'a EvolutionProblem,
    e_min: f64,
    e_max: f64,
    newton: NewtonSolver,
    last_dt: f64,
    pub max_iter: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(p: &'a EvolutionProblem, reuse_jacobian: bool) -> Result<Self, SpaceError> {
        let eig = p.spaces.v.pencil_eigenvalues(&p.spaces.e)?;
        Ok(Self {
            p,
            e_min: eig.min().max(0.0),
            e_max: eig.max().max(0.0),
            newton: NewtonSolver::new(reuse_jacobian),
            last_dt: f64::NAN,
            max_iter: 100_000,
        })
    }

    /// Monotonicity and Lipschitz constants of the step map at `dt`.
    pub fn constants(&self, dt: f64) -> (f64, f64) {
        // A singular E with no monotone part gives no usable bound; keep the
        // constant positive so the problem is well formed.
        let alpha = (self.e_min / dt + self.p.alpha_hint).max(f64::MIN_POSITIVE);
        let lip = self.e_max / dt + self.p.lipschitz_hint;
        (alpha, lip.max(alpha))
    }

    pub fn step(&mut self, u_n: &DVector<f64>, t_next: f64, dt: f64, tol: f64) -> Result<SolveReport, SolveError> {
        if dt != self.last_dt {
            self.newton.invalidate();
            self.last_dt = dt;
        }
        let op = StepOperator { p: self.p, u_n, t: t_next, inv_dt: 1.0 / dt };
        let (alpha, lip) = self.constants(dt);
        let rhs = (self.p.f)(t_next);
        let mp = MonotoneProblem::new(&op, &self.p.spaces.v, alpha, lip, rhs)?;
        match self.p.method {
            Method::Richardson => solve_strongly_monotone(&mp, u_n, tol, self.max_iter),
            Method::Newton => self.newton.solve(&mp, u_n, tol, self.max_iter.min(200)),
        }
    }
}

/// Solves `(1/dt) E (u - u_n) + A u + B(t_next, u) = f(t_next)` to a dual-norm
/// residual of `tol`.
pub fn implicit_euler_step(
    p: &EvolutionProblem,
    u_n: &DVector<f64>,
    t_next: f64,
    dt: f64,
    tol: f64,
) -> Result<SolveReport, SolveError> {
    if !(dt > 0.0) {
        return Err(SolveError::InvalidTolerance(dt));
    }
    let mut stepper = Stepper::new(p, false)?;
    stepper.step(u_n, t_next, dt, tol)
}

/// Marches `n_steps` implicit Euler steps from `u(0) = u0`.
pub fn run(p: &EvolutionProblem, tol: f64) -> Result<Trajectory, EvolutionError> {
    p.validate()?;
    let mut stepper = Stepper::new(p, p.method == Method::Newton)?;
    let dt = p.dt();
    let mut traj = Trajectory::default();
    let u0 = p.spaces.v.project(&p.u0)?;
    traj.push(p, 0.0, u0, 0.0, 0);
    for n in 1..=p.n_steps {
        let t = n as f64 * dt;
        let u_n = traj.last().clone();
        match stepper.step(&u_n, t, dt, tol) {
            Ok(rep) if rep.converged => {
                let u = p.spaces.v.project(&rep.solution)?;
                traj.push(p, t, u, rep.final_residual, rep.iterations);
            }
            Ok(rep) => {
                return Err(EvolutionError::NotConverged {
                    step: n,
                    t,
                    report: Box::new(rep),
                    partial: Box::new(traj),
                });
            }
            Err(source) => {
                return Err(EvolutionError::Step { step: n, t, source, partial: Box::new(traj) });
            }
        }
    }
    Ok(traj)
}

/// Residual of `⟨E(a-b), a⟩ = ½(⟨Ea,a⟩ - ⟨Eb,b⟩ + ⟨E(a-b), a-b⟩)`.
pub fn energy_identity_check(e: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a - b;
    let lhs = (e * &d).dot(a);
    let rhs = 0.5 * ((e * a).dot(a) - (e * b).dot(b) + (e * &d).dot(&d));
    (lhs - rhs).abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationRecord {
    pub t: f64,
    /// `⟨B(t, u), u⟩` at the new state.
    pub b_pairing: f64,
    /// `⟨A u, u⟩` at the new state.
    pub a_pairing: f64,
    /// `½ ⟨E u, u⟩` at the new state.
    pub energy: f64,
    /// `½‖u_{n+1}‖_E² - ½‖u_n‖_E²`.
    pub energy_change: f64,
    /// Step equation tested with the new state, after the telescoping identity.
    pub balance_residual: f64,
    /// `balance_residual > 10 tol`.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationReport {
    pub records: Vec<DissipationRecord>,
    pub initial_energy: f64,
    /// `½‖u_N‖_E² + Σ dt (⟨A u, u⟩ + ⟨B u, u⟩ - ⟨f, u⟩)`.
    pub cumulative: f64,
    /// `initial_energy + 10 tol n_steps`.
    pub bound: f64,
    pub bounded: bool,
}

pub fn dissipation_report(traj: &Trajectory, p: &EvolutionProblem, tol: f64) -> DissipationReport {
    let e = &p.spaces.e;
    let half_energy = |u: &DVector<f64>| 0.5 * (e * u).dot(u);
    let initial_energy = traj.states.first().map_or(0.0, half_energy);
    let mut records = Vec::with_capacity(traj.states.len().saturating_sub(1));
    let mut cumulative_work = 0.0;
    for n in 1..traj.states.len() {
        let (u_prev, u) = (&traj.states[n - 1], &traj.states[n]);
        let t = traj.times[n];
        let dt = t - traj.times[n - 1];
        let b_pairing = (p.b_t)(t, u).dot(u);
        let a_pairing = p.a_mono.apply(u).dot(u);
        let f_pairing = (p.f)(t).dot(u);
        let energy = half_energy(u);
        let energy_change = energy - half_energy(u_prev);
        let jump = half_energy(&(u - u_prev));
        let balance_residual = (energy_change + jump + dt * (a_pairing + b_pairing - f_pairing)).abs();
        cumulative_work += dt * (a_pairing + b_pairing - f_pairing);
        records.push(DissipationRecord {
            t,
            b_pairing,
            a_pairing,
            energy,
            energy_change,
            balance_residual,
            flagged: balance_residual > 10.0 * tol,
        });
    }
    let final_energy = traj.states.last().map_or(0.0, half_energy);
    let cumulative = final_energy + cumulative_work;
    let bound = initial_energy + 10.0 * tol * records.len() as f64;
    DissipationReport { records, initial_energy, cumulative, bound, bounded: cumulative <= bound }
}

/// Temporal self-convergence measurement.
#[derive(Clone, Debug)]
pub struct ConvergenceStudy {
    /// Step counts of the three measured levels (`dt`, `dt/2`, `dt/4`).
    pub steps: [usize; 3],
    /// `‖u_level(T) - u_ref(T)‖_V`.
    pub errors: [f64; 3],
    /// `log2(e_i / e_{i+1})` for consecutive levels.
    pub orders: [f64; 2],
    /// Least-squares slope of `log e` against `log dt`.
    pub fitted_order: f64,
    /// Trajectories of the three measured levels.
    pub trajectories: Vec<Trajectory>,
}

/// Runs the problem at `dt`, `dt/2`, `dt/4` and compares final states with a
/// reference built from the `dt/8` and `dt/16` runs by Richardson
/// extrapolation (`2 u_{dt/16} - u_{dt/8}`), which removes the first-order
/// error term of the reference itself.
///
/// `build(n)` must return the problem discretized with `n` steps. Levels run
/// on up to `threads` worker threads.
pub fn self_convergence<F>(build: F, base_steps: usize, tol: f64, threads: usize) -> Result<ConvergenceStudy, EvolutionError>
where
    F: Fn(usize) -> EvolutionProblem + Sync,
{
    let factors = [1usize, 2, 4, 8, 16];
    let results: Vec<Mutex<Option<Result<Trajectory, EvolutionError>>>> =
        factors.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= factors.len() {
            break;
        }
        // Largest runs first when several workers share the queue.
        let idx = factors.len() - 1 - i;
        let p = build(base_steps * factors[idx]);
        *results[idx].lock().expect("result lock") = Some(run(&p, tol));
    };
    let threads = threads.clamp(1, factors.len());
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    let mut trajs = Vec::with_capacity(factors.len());
    for r in results {
        trajs.push(r.into_inner().expect("result lock").expect("every level ran")?);
    }
    let v = build(base_steps).spaces.v;
    let reference = trajs[4].last() * 2.0 - trajs[3].last();
    let mut errors = [0.0; 3];
    for (k, e) in errors.iter_mut().enumerate() {
        *e = v.norm(&(trajs[k].last() - &reference))?;
    }
    let orders = [(errors[0] / errors[1]).log2(), (errors[1] / errors[2]).log2()];
    // Slope of log e against log dt with dt ∝ 1, 1/2, 1/4.
    let xs = [0.0, -(2f64.ln()), -(4f64.ln())];
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    trajs.truncate(3);
    Ok(ConvergenceStudy {
        steps: [base_steps, base_steps * 2, base_steps * 4],
        errors,
        orders,
        fitted_order: sxy / sxx,
        trajectories: trajs,
    })
}
