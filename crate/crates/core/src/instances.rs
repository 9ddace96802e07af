//! Built-in coupled systems with analytically known constants.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::reduction::{ConstantsRecord, CoupledOperators};
use crate::space::SpaceDescriptor;

/// Scalar system `Ã = 2 x1 + y`, `B̃ = x1 + 2 y`, `y0* = 4`, for which
/// `R x = (4 - x) / 2` and `S x = 1.5 x + 2`.
pub fn scalar_closed_form() -> CoupledOperators {
    CoupledOperators {
        a_tilde: Arc::new(|x1, _, y| x1 * 2.0 + y),
        b_tilde: Arc::new(|x1, _, y| x1 + y * 2.0),
        b_tilde_jacobian: Some(Arc::new(|_, _, _| DMatrix::from_element(1, 1, 2.0))),
        x_space: SpaceDescriptor::euclidean("X", 1).expect("valid space"),
        y_space: SpaceDescriptor::euclidean("Y", 1).expect("valid space"),
        constants: ConstantsRecord::new(2.0, 1.0, 2.0, 1.0),
        y0_star: DVector::from_element(1, 4.0),
        lipschitz_b_y: 2.0,
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Matrix whose symmetric part has spectrum in `[lo, hi]`, plus a skew part.
fn monotone_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = gaussian(rng, n, n).qr().q();
    let eig = DVector::from_fn(n, |_, _| rng.random_range(lo..=hi));
    let skew = gaussian(rng, n, n);
    let skew = (&skew - skew.transpose()) * 0.25;
    &q * DMatrix::from_diagonal(&eig) * q.transpose() + skew
}

/// Scales `m` to spectral norm `target`.
fn with_norm(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let n = spectral_norm(&m);
    if n == 0.0 { m } else { m * (target / n) }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Smallest eigenvalue of the symmetric part.
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// Linear system `Ã = A_xx x1 + A_xy y`, `B̃ = C x1 + D y` on Euclidean spaces.
pub struct LinearBlocks {
    pub ops: CoupledOperators,
    pub a_xx: DMatrix<f64>,
    pub a_xy: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearBlocks {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize) -> Self {
        let a_xx = monotone_matrix(rng, nx, 1.0, 3.0);
        let d = monotone_matrix(rng, ny, 1.0, 3.0);
        let a_xy = with_norm(gaussian(rng, nx, ny), rng.random_range(0.1..0.9));
        let c = with_norm(gaussian(rng, ny, nx), rng.random_range(0.1..0.9));
        let y0_star = DVector::from_fn(ny, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_blocks(a_xx, a_xy, c, d, y0_star)
    }

    pub fn from_blocks(
        a_xx: DMatrix<f64>,
        a_xy: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        y0_star: DVector<f64>,
    ) -> Self {
        let constants = ConstantsRecord::new(
            sym_min_eigenvalue(&a_xx),
            spectral_norm(&a_xy),
            sym_min_eigenvalue(&d),
            spectral_norm(&c),
        );
        let (ax, ay, cm, dm) = (a_xx.clone(), a_xy.clone(), c.clone(), d.clone());
        let dj = d.clone();
        let ops = CoupledOperators {
            a_tilde: Arc::new(move |x1, _, y| &ax * x1 + &ay * y),
            b_tilde: Arc::new(move |x1, _, y| &cm * x1 + &dm * y),
            b_tilde_jacobian: Some(Arc::new(move |_, _, _| dj.clone())),
            x_space: SpaceDescriptor::euclidean("X", a_xx.nrows()).expect("valid space"),
            y_space: SpaceDescriptor::euclidean("Y", d.nrows()).expect("valid space"),
            constants,
            y0_star,
            lipschitz_b_y: spectral_norm(&d),
        };
        Self { ops, a_xx, a_xy, c, d }
    }

    /// `D^{-1} (y0* - C x)` by dense LU.
    pub fn r_oracle(&self, x: &DVector<f64>) -> DVector<f64> {
        self.d.clone().lu().solve(&(&self.ops.y0_star - &self.c * x)).expect("D invertible")
    }

    /// Schur complement form `S x = K x + s0`, returned as `(K, s0)`.
    pub fn schur(&self) -> (DMatrix<f64>, DVector<f64>) {
        let lu = self.d.clone().lu();
        let dinv_c = lu.solve(&self.c).expect("D invertible");
        let dinv_y = lu.solve(&self.ops.y0_star).expect("D invertible");
        (&self.a_xx - &self.a_xy * dinv_c, &self.a_xy * dinv_y)
    }
}

/// Random nonlinear system on Euclidean spaces:
///
/// ```text
/// Ã(x1, x2, y) = P x1 + c ⊙ tanh(x1) + Cx g(y) + a ⊙ tanh(x2)
/// B̃(x1, x2, y) = D y + d ⊙ tanh(y) + Cy x1 + Bm tanh(x2)
/// ```
///
/// with `g` the identity or `tanh`, and `c, d >= 0`. Then `alpha_A` is the
/// smallest eigenvalue of `sym P`, `beta_A = ‖Cx‖`, `alpha_B` that of `sym D`
/// and `beta_B = ‖Cy‖`.
pub fn random_linear_tanh<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize) -> CoupledOperators {
    let p = monotone_matrix(rng, nx, 0.5, 2.0);
    let d = monotone_matrix(rng, ny, 0.5, 2.0);
    let alpha_a = sym_min_eigenvalue(&p);
    let alpha_b = sym_min_eigenvalue(&d);
    // Keep alpha_A alpha_B > beta_A beta_B with some room.
    let budget = (alpha_a * alpha_b).sqrt();
    let cx = with_norm(gaussian(rng, nx, ny), budget * rng.random_range(0.1..0.9));
    let cy = with_norm(gaussian(rng, ny, nx), budget * rng.random_range(0.1..0.9));
    let c_t = DVector::from_fn(nx, |_, _| rng.random_range(0.0..1.0));
    let d_t = DVector::from_fn(ny, |_, _| rng.random_range(0.0..1.0));
    let a_t = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
    let b_m = gaussian(rng, ny, nx) * 0.5;
    let tanh_in_y = rng.random_bool(0.5);
    let y0_star = DVector::from_fn(ny, |_, _| rng.sample::<f64, _>(StandardNormal));

    let constants = ConstantsRecord::new(alpha_a, spectral_norm(&cx), alpha_b, spectral_norm(&cy));
    let lipschitz_b_y = spectral_norm(&d) + d_t.max();
    let (dj, dtj) = (d.clone(), d_t.clone());
    CoupledOperators {
        a_tilde: Arc::new(move |x1, x2, y| {
            let gy = if tanh_in_y { y.map(f64::tanh) } else { y.clone() };
            &p * x1 + c_t.component_mul(&x1.map(f64::tanh)) + &cx * gy + a_t.component_mul(&x2.map(f64::tanh))
        }),
        b_tilde: Arc::new(move |x1, x2, y| {
            &d * y + d_t.component_mul(&y.map(f64::tanh)) + &cy * x1 + &b_m * x2.map(f64::tanh)
        }),
        b_tilde_jacobian: Some(Arc::new(move |_, _, y| {
            let sech2 = y.map(|v| 1.0 - v.tanh().powi(2));
            &dj + DMatrix::from_diagonal(&dtj.component_mul(&sech2))
        })),
        x_space: SpaceDescriptor::euclidean("X", nx).expect("valid space"),
        y_space: SpaceDescriptor::euclidean("Y", ny).expect("valid space"),
        constants,
        y0_star,
        lipschitz_b_y,
    }
}
