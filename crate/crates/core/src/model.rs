//! One-dimensional Galerkin model of Cahn-Hilliard phase separation coupled
//! to quasi-static linear elasticity on `(0, 1)`.
//!
//! Concentration lives in `V`: P1 nodal values on a uniform grid with zero
//! trapezoid-weighted mean, `⟨u, v⟩_V = ⟨u', v'⟩`. Strains live in `Y`:
//! piecewise constants with the L² Gram matrix. The displacement space `U`
//! holds P1 functions vanishing at `x = 0`, and `ε(U) = Y`.
//!
//! The coefficient functions are
//!
//! ```text
//! b1 = a1 p + d1 e + c1 tanh(u)
//! b2 = a2 p + d2 e + c2 tanh(u)
//! b0 = k0 e + d0 p + gamma0 tanh(u)
//! ```
//!
//! with `p = u1'`, `u = u2` evaluated at cell midpoints.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{EvolutionError, EvolutionProblem, EvolutionSpaces, Trajectory};
use crate::monotone::{Method, Operator};
use crate::reduction::{apply_s_tilde, solve_r, ConstantsRecord, CoupledOperators, InnerSettings, ReductionError};
use crate::space::{poincare_constant, sqrt_spd, DualVector, SpaceDescriptor, SpaceError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration is not decoupled-linear: {0} must be zero")]
    NotDecoupled(&'static str),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    /// Mobility.
    #[serde(rename = "M")]
    pub m: f64,
    pub mu: f64,
    pub a1: f64,
    pub d1: f64,
    pub c1: f64,
    pub a2: f64,
    pub d2: f64,
    pub c2: f64,
    pub k0: f64,
    pub d0: f64,
    pub gamma0: f64,
    /// Growth exponent of `b0`; metadata only.
    pub q0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    /// `φ(r) = lambda_phi r² / 2`.
    pub lambda_phi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub n_steps: usize,
}

/// `u0(x) = amplitude cos(mode π x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mode: usize,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub coefficients: Coefficients,
    pub potential: PotentialConfig,
    pub time: TimeConfig,
    pub initial: InitialConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig { n_cells: 64 },
            coefficients: Coefficients {
                m: 1.0,
                mu: 0.1,
                a1: 1.0,
                d1: 0.1,
                c1: 0.1,
                a2: 0.1,
                d2: 0.05,
                c2: 0.05,
                k0: 1.0,
                d0: 0.1,
                gamma0: 0.1,
                q0: 4.0,
            },
            potential: PotentialConfig { lambda_phi: 1.0 },
            time: TimeConfig { t_end: 0.02, n_steps: 200 },
            initial: InitialConfig { mode: 2, amplitude: 0.5 },
        }
    }
}

impl ModelConfig {
    /// Decoupled linear variant: only `a1`, `M`, `mu` and `lambda_phi` act.
    pub fn decoupled(n_cells: usize, m: f64, mu: f64, a1: f64, lambda_phi: f64) -> Self {
        let mut cfg = Self::default();
        cfg.grid.n_cells = n_cells;
        cfg.coefficients = Coefficients {
            m,
            mu,
            a1,
            d1: 0.0,
            c1: 0.0,
            a2: 0.0,
            d2: 0.0,
            c2: 0.0,
            k0: 1.0,
            d0: 0.0,
            gamma0: 0.0,
            q0: 4.0,
        };
        cfg.potential.lambda_phi = lambda_phi;
        cfg.initial = InitialConfig { mode: 1, amplitude: 1.0 };
        cfg
    }

    fn validate(&self) -> Result<(), ModelError> {
        let c = &self.coefficients;
        let values = [
            c.m, c.mu, c.a1, c.d1, c.c1, c.a2, c.d2, c.c2, c.k0, c.d0, c.gamma0, c.q0,
            self.potential.lambda_phi, self.time.t_end, self.initial.amplitude,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidConfig("all coefficients must be finite".into()));
        }
        if self.grid.n_cells < 4 {
            return Err(ModelError::InvalidConfig(format!("n_cells must be >= 4, got {}", self.grid.n_cells)));
        }
        Ok(())
    }

    fn validate_for_assembly(&self) -> Result<(), ModelError> {
        self.validate()?;
        let c = &self.coefficients;
        if !(c.m > 0.0) || !(c.mu >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("need M > 0 and mu >= 0, got M = {}, mu = {}", c.m, c.mu)));
        }
        if !(c.k0 > 0.0) {
            return Err(ModelError::InvalidConfig(format!("need k0 > 0, got {}", c.k0)));
        }
        if !(self.potential.lambda_phi >= 0.0) {
            return Err(ModelError::InvalidConfig("lambda_phi must be >= 0".into()));
        }
        if !(self.time.t_end > 0.0) || self.time.n_steps == 0 {
            return Err(ModelError::InvalidConfig("need t_end > 0 and n_steps >= 1".into()));
        }
        Ok(())
    }
}

/// Convex `C¹` potential `φ` with at most quadratic growth.
pub trait Potential: Send + Sync {
    fn value(&self, r: f64) -> f64;
    fn derivative(&self, r: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadratic {
    pub lambda: f64,
}

impl Potential for Quadratic {
    fn value(&self, r: f64) -> f64 {
        0.5 * self.lambda * r * r
    }

    fn derivative(&self, r: f64) -> f64 {
        self.lambda * r
    }
}

/// Trapezoid weights `h/2, h, ..., h, h/2`.
pub fn trapezoid_weights(n_cells: usize) -> DVector<f64> {
    let h = 1.0 / n_cells as f64;
    DVector::from_fn(n_cells + 1, |i, _| if i == 0 || i == n_cells { 0.5 * h } else { h })
}

/// P1 stiffness matrix on the uniform grid.
pub fn stiffness_matrix(n_cells: usize) -> DMatrix<f64> {
    let h = 1.0 / n_cells as f64;
    let mut s = DMatrix::zeros(n_cells + 1, n_cells + 1);
    for c in 0..n_cells {
        s[(c, c)] += 1.0 / h;
        s[(c + 1, c + 1)] += 1.0 / h;
        s[(c, c + 1)] -= 1.0 / h;
        s[(c + 1, c)] -= 1.0 / h;
    }
    s
}

/// P1 consistent mass matrix on the uniform grid.
pub fn mass_matrix(n_cells: usize) -> DMatrix<f64> {
    let h = 1.0 / n_cells as f64;
    let mut m = DMatrix::zeros(n_cells + 1, n_cells + 1);
    for c in 0..n_cells {
        m[(c, c)] += h / 3.0;
        m[(c + 1, c + 1)] += h / 3.0;
        m[(c, c + 1)] += h / 6.0;
        m[(c + 1, c)] += h / 6.0;
    }
    m
}

/// `V` (zero-mean H¹ seminorm) and `H` (zero-mean L²) on `n_cells` cells.
pub fn concentration_spaces(n_cells: usize) -> Result<(SpaceDescriptor, SpaceDescriptor), SpaceError> {
    let w = trapezoid_weights(n_cells);
    let gram_v = stiffness_matrix(n_cells) + &w * w.transpose();
    let v = SpaceDescriptor::zero_mean("V", gram_v, w.clone())?;
    let h = SpaceDescriptor::zero_mean("H", mass_matrix(n_cells), w)?;
    Ok((v, h))
}

/// Poincaré constant of the zero-mean discrete space.
pub fn discrete_poincare(n_cells: usize) -> Result<f64, SpaceError> {
    let (v, h) = concentration_spaces(n_cells)?;
    poincare_constant(&v, &h, &DMatrix::identity(n_cells + 1, n_cells + 1))
}

/// Pointwise evaluation of the coefficient family on a grid. Cheap to copy
/// into operator closures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Family {
    pub coeffs: Coefficients,
    pub n_cells: usize,
}

impl Family {
    pub fn new(coeffs: Coefficients, n_cells: usize) -> Self {
        Self { coeffs, n_cells }
    }

    fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    /// Cell gradients of `u1` and midpoint values of `u2`.
    fn cell_data(&self, u1: &DVector<f64>, u2: &DVector<f64>, c: usize) -> (f64, f64) {
        let p = (u1[c + 1] - u1[c]) / self.h();
        let mid = 0.5 * (u2[c] + u2[c + 1]);
        (p, mid)
    }

    /// Removes the component that pairs with constants.
    fn compatible(&self, mut f: DualVector) -> DualVector {
        let total = f.sum();
        let h = self.h();
        let n = self.n_cells;
        for (i, v) in f.iter_mut().enumerate() {
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            *v -= total * w;
        }
        f
    }

    /// Galerkin vector of `∫ b1 v' + ∫ b2 v` with midpoint quadrature.
    pub fn bx(&self, u1: &DVector<f64>, u2: &DVector<f64>, e: &DVector<f64>) -> DualVector {
        let k = &self.coeffs;
        let h = self.h();
        let mut out = DVector::zeros(self.n_cells + 1);
        for c in 0..self.n_cells {
            let (p, mid) = self.cell_data(u1, u2, c);
            let t = mid.tanh();
            let b1 = k.a1 * p + k.d1 * e[c] + k.c1 * t;
            let b2 = k.a2 * p + k.d2 * e[c] + k.c2 * t;
            out[c] += -b1 + 0.5 * h * b2;
            out[c + 1] += b1 + 0.5 * h * b2;
        }
        self.compatible(out)
    }

    /// Galerkin vector of `∫ b0 e1` over piecewise-constant strains `e1`.
    pub fn by(&self, u1: &DVector<f64>, u2: &DVector<f64>, e: &DVector<f64>) -> DualVector {
        let k = &self.coeffs;
        let h = self.h();
        DVector::from_fn(self.n_cells, |c, _| {
            let (p, mid) = self.cell_data(u1, u2, c);
            h * (k.k0 * e[c] + k.d0 * p + k.gamma0 * mid.tanh())
        })
    }
}

/// Galerkin vector of `φ'(u)` and the discrete `Q(u) = ∫ φ(u)`, both with
/// two-point Gauss quadrature per cell (exact for the quadratic family).
#[derive(Clone)]
pub struct PotentialOperator {
    pub phi: Arc<dyn Potential>,
    pub n_cells: usize,
}

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

impl PotentialOperator {
    pub fn q(&self, u: &DVector<f64>) -> f64 {
        let h = 1.0 / self.n_cells as f64;
        let mut total = 0.0;
        for c in 0..self.n_cells {
            for s in GAUSS {
                total += 0.5 * h * self.phi.value((1.0 - s) * u[c] + s * u[c + 1]);
            }
        }
        total
    }
}

impl Operator for PotentialOperator {
    fn apply(&self, u: &DVector<f64>) -> DualVector {
        let n = self.n_cells;
        let h = 1.0 / n as f64;
        let mut out = DVector::<f64>::zeros(n + 1);
        for c in 0..n {
            for s in GAUSS {
                let d = 0.5 * h * self.phi.derivative((1.0 - s) * u[c] + s * u[c + 1]);
                out[c] += d * (1.0 - s);
                out[c + 1] += d * s;
            }
        }
        let total = out.sum();
        let w = trapezoid_weights(n);
        out - w * total
    }
}

/// Every constant of the coefficient family that enters the hypotheses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyConstants {
    pub c_p: f64,
    pub alpha_b1p: f64,
    pub beta_b1e: f64,
    pub beta_b2p: f64,
    pub beta_b2e: f64,
    pub alpha_b0e: f64,
    pub beta_b0e: f64,
    pub beta_b0p: f64,
    pub c_b1u: f64,
    pub c_b1e: f64,
    pub c_b2u: f64,
    pub c_b2e: f64,
    pub c_b0u: f64,
    pub gamma_b0u: f64,
    pub m1: f64,
    pub m2: f64,
    /// Minimizer of `φ_a` over `c_a`; `inf` or `0` in the degenerate limits.
    pub c_a_star: f64,
    pub phi_a: f64,
    pub record: ConstantsRecord,
}

impl FamilyConstants {
    /// Coercivity constant of the reduced operator,
    /// `(α_A α_B - β_A β_B - α_B φ_a) / (2 α_B)`.
    pub fn coercivity(&self) -> f64 {
        let r = &self.record;
        (r.alpha_a * r.alpha_b - r.beta_a * r.beta_b - r.alpha_b * self.phi_a) / (2.0 * r.alpha_b)
    }

    pub fn h4_margin(&self) -> f64 {
        self.alpha_b1p - self.c_p * self.beta_b2p
    }

    pub fn h4a_margin(&self) -> f64 {
        (self.alpha_b1p - self.c_p * self.beta_b2p) * self.alpha_b0e
            - (self.beta_b1e + self.c_p * self.beta_b2e) * self.beta_b0p
            - self.phi_a
    }

    /// `φ_a` at a given `c_a > 0`.
    pub fn phi_a_at(&self, c_a: f64) -> f64 {
        let (p, q) = self.phi_groups();
        ((c_a + 1.0) * p + (1.0 + 1.0 / c_a) * q).sqrt()
    }

    /// The two bracketed groups of `φ_a²`, the second including its `C_P` factor.
    pub fn phi_groups(&self) -> (f64, f64) {
        let p = self.c_b1u + self.c_p * self.c_b1e * self.c_b0u / self.alpha_b0e;
        let q = self.c_p * (self.c_b2u + self.c_p * self.c_b2e * self.c_b0u / self.alpha_b0e);
        (p, q)
    }
}

/// Constants of the coefficient family for a given Poincaré constant.
///
/// The growth constants come from `|b|² <= 3 (x² + y² + z²)` for a sum of
/// three terms together with `|tanh u| <= |u|`.
pub fn derive_constants(coeffs: &Coefficients, c_p: f64) -> FamilyConstants {
    let k = coeffs;
    let mut fc = FamilyConstants {
        c_p,
        alpha_b1p: k.a1,
        beta_b1e: k.d1.abs(),
        beta_b2p: k.a2.abs(),
        beta_b2e: k.d2.abs(),
        alpha_b0e: k.k0,
        beta_b0e: k.k0,
        beta_b0p: k.d0.abs(),
        c_b1u: 3.0 * k.c1 * k.c1,
        c_b1e: 3.0 * k.d1 * k.d1,
        c_b2u: 3.0 * k.c2 * k.c2,
        c_b2e: 3.0 * k.d2 * k.d2,
        c_b0u: 3.0 * k.gamma0 * k.gamma0,
        gamma_b0u: 2.0 * k.gamma0.abs(),
        m1: k.k0,
        m2: k.k0,
        c_a_star: 1.0,
        phi_a: 0.0,
        record: ConstantsRecord::new(
            k.a1 - c_p * k.a2.abs(),
            k.d1.abs() + c_p * k.d2.abs(),
            k.k0,
            k.d0.abs(),
        ),
    };
    let (p, q) = fc.phi_groups();
    let (c_star, phi2) = if p == 0.0 && q == 0.0 {
        (1.0, 0.0)
    } else if p == 0.0 {
        (f64::INFINITY, q)
    } else if q == 0.0 {
        (0.0, p)
    } else {
        let c = (q / p).sqrt();
        (c, (c + 1.0) * p + (1.0 + 1.0 / c) * q)
    };
    fc.c_a_star = c_star;
    fc.phi_a = phi2.max(0.0).sqrt();
    fc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HypothesisFlags {
    pub h0: bool,
    pub h1a: bool,
    pub h2: bool,
    pub h3: bool,
    pub h3a: bool,
    pub h4: bool,
    pub h4a: bool,
    pub h5: bool,
}

impl HypothesisFlags {
    /// (H0), (H1), (H2), (H3), (H4), (H5); (H1) follows from (H1a) here.
    pub fn h(&self) -> bool {
        self.h0 && self.h1a && self.h2 && self.h3 && self.h4 && self.h5
    }

    /// (H0), (H1a), (H2), (H3a), (H4a), (H5).
    pub fn ha(&self) -> bool {
        self.h0 && self.h1a && self.h2 && self.h3a && self.h4a && self.h5
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypothesisReport {
    pub constants: FamilyConstants,
    pub h4_margin: f64,
    pub h4a_margin: f64,
    /// Weighted mean of the initial profile before any projection.
    pub initial_mean: f64,
    pub passes: HypothesisFlags,
    /// `0` if `mu > 0`, else `1`. Carried for completeness; not used.
    pub mu0: f64,
}

/// Nodal values `amplitude cos(mode π x_i)`.
pub fn initial_profile(cfg: &ModelConfig) -> DVector<f64> {
    let n = cfg.grid.n_cells;
    let (k, a) = (cfg.initial.mode as f64, cfg.initial.amplitude);
    DVector::from_fn(n + 1, |i, _| a * (k * PI * i as f64 / n as f64).cos())
}

pub fn check_hypotheses(cfg: &ModelConfig) -> Result<HypothesisReport, ModelError> {
    cfg.validate()?;
    let c_p = discrete_poincare(cfg.grid.n_cells)?;
    let k = &cfg.coefficients;
    let constants = derive_constants(k, c_p);
    let h4_margin = constants.h4_margin();
    let h4a_margin = constants.h4a_margin();
    let w = trapezoid_weights(cfg.grid.n_cells);
    let u0 = initial_profile(cfg);
    let initial_mean = w.dot(&u0) / w.sum();

    let h0 = k.m > 0.0 && k.mu >= 0.0;
    let h1a = cfg.potential.lambda_phi >= 0.0;
    let h2 = k.a1 > 0.0;
    let h3 = k.k0 > 0.0;
    let h3a = h3 && k.q0 > 2.0;
    let h4 = h4_margin > 0.0 && constants.m1 <= constants.alpha_b0e && constants.alpha_b0e <= constants.beta_b0e
        && constants.beta_b0e <= constants.m2;
    let h4a = h4a_margin > 0.0;
    let h5 = initial_mean.abs() <= 1e-12 * cfg.initial.amplitude.abs().max(1.0) && u0.iter().all(|v| v.is_finite());

    Ok(HypothesisReport {
        constants,
        h4_margin,
        h4a_margin,
        initial_mean,
        passes: HypothesisFlags { h0, h1a, h2, h3, h3a, h4, h4a, h5 },
        mu0: if k.mu > 0.0 { 0.0 } else { 1.0 },
    })
}

/// `σ_k = M ν (λ + a1 ν) / (1 + M μ ν)` with `ν = (kπ)²`: the decay rate of
/// `cos(kπx)` in the decoupled linear model.
pub fn dispersion_rate(cfg: &ModelConfig, k: usize) -> Result<f64, ModelError> {
    check_decoupled(cfg)?;
    let c = &cfg.coefficients;
    let nu = (k as f64 * PI).powi(2);
    Ok(c.m * nu * (cfg.potential.lambda_phi + c.a1 * nu) / (1.0 + c.m * c.mu * nu))
}

pub fn check_decoupled(cfg: &ModelConfig) -> Result<(), ModelError> {
    let c = &cfg.coefficients;
    let named = [("d1", c.d1), ("c1", c.c1), ("a2", c.a2), ("d2", c.d2), ("c2", c.c2), ("d0", c.d0), ("gamma0", c.gamma0)];
    match named.iter().find(|(_, v)| *v != 0.0) {
        Some((name, _)) => Err(ModelError::NotDecoupled(name)),
        None => Ok(()),
    }
}

/// Assembled spaces, linear operators and operator closures of the model.
pub struct AssembledModel {
    pub cfg: ModelConfig,
    pub family: Family,
    pub v: SpaceDescriptor,
    pub h_space: SpaceDescriptor,
    pub u_space: SpaceDescriptor,
    pub y: SpaceDescriptor,
    /// `U -> Y`, cell difference quotients with `u(0) = 0`.
    pub strain: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// `M` times the stiffness matrix.
    pub f_mat: DMatrix<f64>,
    /// Consistent mass matrix, the pairing `I`.
    pub i_mat: DMatrix<f64>,
    /// `μ I + I F⁻¹ I`.
    pub e_mat: DMatrix<f64>,
    /// `μ Id + F⁻¹ I`, symmetric in the `H` inner product.
    pub e1: DMatrix<f64>,
    /// Symmetric root of `e1`, the map `K`.
    pub e2: DMatrix<f64>,
    pub constants: FamilyConstants,
    pub potential: PotentialOperator,
}

impl AssembledModel {
    pub fn assemble(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate_for_assembly()?;
        let n = cfg.grid.n_cells;
        let hh = 1.0 / n as f64;
        let coeffs = cfg.coefficients;
        let (v, h_space) = concentration_spaces(n)?;
        let stiffness = stiffness_matrix(n);
        let i_mat = mass_matrix(n);
        let f_mat = &stiffness * coeffs.m;

        let u_gram = (&stiffness + &i_mat).view((1, 1), (n, n)).into_owned();
        let u_space = SpaceDescriptor::new("U", u_gram)?;
        let y = SpaceDescriptor::new("Y", DMatrix::from_diagonal_element(n, n, hh))?;
        let mut strain = DMatrix::zeros(n, n);
        for c in 0..n {
            strain[(c, c)] = 1.0 / hh;
            if c > 0 {
                strain[(c, c - 1)] = -1.0 / hh;
            }
        }

        // F⁻¹ I through the SPD Gram of V; on zero-mean data this is the
        // zero-mean inverse of the stiffness matrix.
        let chol = v.gram().clone().cholesky().ok_or(SpaceError::NotPositiveDefinite { label: "V".into() })?;
        let f_inv_i = chol.solve(&i_mat) / coeffs.m;
        let e1 = DMatrix::identity(n + 1, n + 1) * coeffs.mu + &f_inv_i;
        let e_mat = &i_mat * coeffs.mu + &i_mat * &f_inv_i;
        let e_mat = (&e_mat + e_mat.transpose()) * 0.5;
        let e2 = sqrt_spd(&h_space, &e1)?;

        let c_p = poincare_constant(&v, &h_space, &DMatrix::identity(n + 1, n + 1))?;
        let constants = derive_constants(&coeffs, c_p);
        let potential = PotentialOperator {
            phi: Arc::new(Quadratic { lambda: cfg.potential.lambda_phi }),
            n_cells: n,
        };
        Ok(Self {
            cfg: *cfg,
            family: Family::new(coeffs, n),
            v,
            h_space,
            u_space,
            y,
            strain,
            stiffness,
            f_mat,
            i_mat,
            e_mat,
            e1,
            e2,
            constants,
            potential,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cfg.grid.n_cells
    }

    pub fn nodes(&self) -> Vec<f64> {
        let n = self.n_cells();
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        let n = self.n_cells();
        (0..n).map(|c| (c as f64 + 0.5) / n as f64).collect()
    }

    /// Projected initial state.
    pub fn initial_state(&self) -> DVector<f64> {
        self.v.project(&initial_profile(&self.cfg)).expect("grid dimension")
    }

    /// Projected `cos(kπx)`.
    pub fn mode(&self, k: usize) -> DVector<f64> {
        let n = self.n_cells();
        let raw = DVector::from_fn(n + 1, |i, _| (k as f64 * PI * i as f64 / n as f64).cos());
        self.v.project(&raw).expect("grid dimension")
    }

    pub fn assemble_bx(&self, _t: f64, u1: &DVector<f64>, u2: &DVector<f64>, e: &DVector<f64>) -> DualVector {
        self.family.bx(u1, u2, e)
    }

    pub fn assemble_by(&self, _t: f64, u1: &DVector<f64>, u2: &DVector<f64>, e: &DVector<f64>) -> DualVector {
        self.family.by(u1, u2, e)
    }

    pub fn potential_a(&self, u: &DVector<f64>) -> DualVector {
        self.potential.apply(u)
    }

    pub fn potential_q(&self, u: &DVector<f64>) -> f64 {
        self.potential.q(u)
    }

    /// The pair `(B̃^X, B̃^Y)` as a coupled system on `V × Y` with `y0* = 0`.
    pub fn coupled_operators(&self) -> CoupledOperators {
        let fam = self.family;
        let k0 = fam.coeffs.k0;
        let h = 1.0 / fam.n_cells as f64;
        let n = fam.n_cells;
        CoupledOperators {
            a_tilde: Arc::new(move |u1, u2, e| fam.bx(u1, u2, e)),
            b_tilde: Arc::new(move |u1, u2, e| fam.by(u1, u2, e)),
            b_tilde_jacobian: Some(Arc::new(move |_, _, _| DMatrix::from_diagonal_element(n, n, h * k0))),
            x_space: self.v.clone(),
            y_space: self.y.clone(),
            constants: self.constants.record,
            y0_star: DVector::zeros(n),
            lipschitz_b_y: k0,
        }
    }

    fn inner_settings(tol: f64) -> InnerSettings {
        InnerSettings { tol, max_iter: 1000, method: Method::Richardson }
    }

    /// Strain `e` solving `B^Y(u, u, e) = 0`.
    pub fn elasticity_solve(&self, _t: f64, u: &DVector<f64>, tol: f64) -> Result<DVector<f64>, ModelError> {
        Ok(solve_r(&self.coupled_operators(), u, u, &Self::inner_settings(tol))?)
    }

    /// `B(t) u = B̃^X(u, u, e(u))`.
    pub fn reduced_b(&self, _t: f64, u: &DVector<f64>, tol: f64) -> Result<DualVector, ModelError> {
        Ok(apply_s_tilde(&self.coupled_operators(), u, u, &Self::inner_settings(tol))?.value)
    }

    pub fn mass_mean(&self, u: &DVector<f64>) -> f64 {
        self.v.weighted_mean(u).expect("grid dimension")
    }

    /// Crude upper bound on the Lipschitz constant of `A + B` in `V`.
    pub fn lipschitz_bound(&self) -> f64 {
        let k = &self.family.coeffs;
        let c_p = self.constants.c_p;
        let r = &self.constants.record;
        let l_r = (k.d0.abs() + k.gamma0.abs() * c_p) / k.k0;
        (k.a1 + c_p * k.a2.abs())
            + c_p * (k.c1.abs() + c_p * k.c2.abs())
            + r.beta_a * l_r
            + self.cfg.potential.lambda_phi * c_p * c_p
    }

    /// Evolution problem `(E u)' + A u + B u = 0`, `u(0) = u0`, with the
    /// configured number of steps.
    pub fn evolution_problem(&self, inner_tol: f64) -> Result<EvolutionProblem, ModelError> {
        self.evolution_problem_with_steps(inner_tol, self.cfg.time.n_steps)
    }

    pub fn evolution_problem_with_steps(&self, inner_tol: f64, n_steps: usize) -> Result<EvolutionProblem, ModelError> {
        let spaces = EvolutionSpaces::with_operator(
            self.v.clone(),
            self.h_space.clone(),
            self.e2.clone(),
            self.e_mat.clone(),
            1e-10,
        )?;
        let ops = self.coupled_operators();
        let settings = Self::inner_settings(inner_tol);
        let n = self.n_cells();
        let b_t = Arc::new(move |_t: f64, u: &DVector<f64>| match apply_s_tilde(&ops, u, u, &settings) {
            Ok(v) => v.value,
            Err(_) => DVector::from_element(u.len(), f64::NAN),
        });
        let pot = self.potential.clone();
        let pot_q = self.potential.clone();
        Ok(EvolutionProblem {
            spaces,
            a_mono: Arc::new(pot),
            b_t,
            f: Arc::new(move |_| DVector::zeros(n + 1)),
            u0: self.initial_state(),
            t_end: self.cfg.time.t_end,
            n_steps,
            alpha_hint: 0.0,
            lipschitz_hint: self.lipschitz_bound(),
            method: Method::Newton,
            potential: Some(Arc::new(move |u: &DVector<f64>| pot_q.q(u))),
        })
    }

    /// Amplitude of mode `k` in `u`, by `H`-projection.
    pub fn mode_amplitude(&self, u: &DVector<f64>, k: usize) -> f64 {
        let phi = self.mode(k);
        let mphi = &self.i_mat * &phi;
        mphi.dot(u) / mphi.dot(&phi)
    }

    /// Least-squares decay rate of mode `k` along a trajectory.
    pub fn fit_decay_rate(&self, traj: &Trajectory, k: usize) -> f64 {
        let pts: Vec<(f64, f64)> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, u)| (*t, self.mode_amplitude(u, k).abs().ln()))
            .collect();
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        -sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dof_counts() {
        let mut cfg = ModelConfig::default();
        cfg.grid.n_cells = 4;
        let m = AssembledModel::assemble(&cfg).unwrap();
        assert_eq!(m.v.effective_dim(), 4);
        assert_eq!(m.u_space.dim(), 4);
        assert_eq!(m.y.dim(), 4);
        cfg.grid.n_cells = 3;
        assert!(AssembledModel::assemble(&cfg).is_err());
    }

    #[test]
    fn strain_of_linear_displacement() {
        let m = AssembledModel::assemble(&ModelConfig::default()).unwrap();
        let n = m.n_cells();
        let u = DVector::from_fn(n, |i, _| (i + 1) as f64 / n as f64);
        let e = &m.strain * u;
        assert!(e.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn decoupled_constants() {
        let mut k = ModelConfig::default().coefficients;
        k.a2 = 0.0;
        k.d0 = 0.0;
        let fc = derive_constants(&k, 0.3);
        assert_eq!(fc.record.alpha_a, 1.0);
        assert_abs_diff_eq!(fc.record.beta_a, 0.1 + 0.3 * 0.05, epsilon = 1e-15);
        assert_eq!(fc.record.alpha_b, 1.0);
        assert_eq!(fc.record.beta_b, 0.0);
    }

    #[test]
    fn zero_coefficients_give_zero_duals() {
        let mut cfg = ModelConfig::default();
        let k = &mut cfg.coefficients;
        (k.a1, k.d1, k.c1, k.a2, k.d2, k.c2, k.d0, k.gamma0) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let fam = Family::new(cfg.coefficients, 16);
        let u = DVector::from_fn(17, |i, _| (i as f64).sin());
        let e = DVector::from_element(16, 0.7);
        assert!(fam.bx(&u, &u, &e).amax() == 0.0);
    }
}
