use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semired::instances::{random_linear_tanh, scalar_closed_form, LinearBlocks};
use semired::monotone::{Method, Operator, PairSampler};
use semired::reduction::{
    apply_s_tilde, check_coupled_residual, check_s1, solve_r, solve_reduced, translate,
    verify_reduction_estimates, ConstantsRecord, InnerSettings, OuterSettings, ReducedOperator,
};

fn newton(tol: f64) -> InnerSettings {
    InnerSettings { tol, max_iter: 100, method: Method::Newton }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn scalar_r_closed_form() {
    let ops = scalar_closed_form();
    let settings = InnerSettings { tol: 1e-14, ..Default::default() };
    for x in [-2.0, 0.0, 2.0, 5.5] {
        let xv = DVector::from_element(1, x);
        let y = solve_r(&ops, &xv, &xv, &settings).unwrap();
        assert!((y[0] - (4.0 - x) / 2.0).abs() < 1e-13);
    }
}

#[test]
fn linear_blocks_match_dense_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let inst = LinearBlocks::random(&mut rng, 4, 4);
        let x = gaussian(&mut rng, 4);
        for settings in [newton(1e-13), InnerSettings { tol: 1e-13, ..Default::default() }] {
            let y = solve_r(&inst.ops, &x, &x, &settings).unwrap();
            assert!((&y - inst.r_oracle(&x)).amax() < 1e-9);
            let s = apply_s_tilde(&inst.ops, &x, &x, &settings).unwrap().value;
            let (k, s0) = inst.schur();
            assert!((s - (k * &x + s0)).amax() < 1e-9);
        }
    }
}

#[test]
fn coupled_residual_of_exact_data_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut inst = LinearBlocks::random(&mut rng, 3, 5);
    let x = gaussian(&mut rng, 3);
    let y = gaussian(&mut rng, 5);
    let x0 = inst.ops.a(&x, &y);
    inst.ops.y0_star = inst.ops.b(&x, &y);
    let (ra, rb) = check_coupled_residual(&inst.ops, &x, &y, &x0).unwrap();
    assert_eq!((ra, rb), (0.0, 0.0));
}

#[test]
fn equivalence_on_random_linear_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tol = 1e-10;
    for _ in 0..10 {
        let n = rng.random_range(2..=16);
        let inst = LinearBlocks::random(&mut rng, n, n);
        let x_star = gaussian(&mut rng, n);
        let reduced = ReducedOperator::new(inst.ops.clone(), newton(1e-13));
        let outer = OuterSettings { tol, max_iter: 50, method: Method::Newton, lipschitz: 0.0 };
        let x = solve_reduced(&reduced, &x_star, &DVector::zeros(n), &outer).unwrap().solution;
        let y = reduced.recover_y(&x).unwrap();
        let (ra, rb) = check_coupled_residual(&inst.ops, &x, &y, &x_star).unwrap();
        assert!(ra <= 2.0 * tol && rb <= 2.0 * tol, "{ra} {rb}");
    }
}

#[test]
fn warm_start_does_not_change_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ops = random_linear_tanh(&mut rng, 5, 4);
    let settings = InnerSettings { tol: 1e-12, ..Default::default() };
    let warm = ReducedOperator::new(ops.clone(), settings);
    let cold = ReducedOperator::cold(ops, settings);
    for _ in 0..20 {
        let x = gaussian(&mut rng, 5);
        let a = warm.recover_y(&x).unwrap();
        let b = cold.recover_y(&x).unwrap();
        assert!((a - b).norm() <= 10.0 * settings.tol);
    }
}

#[test]
fn scaling_inner_problem_leaves_r_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let ops = random_linear_tanh(&mut rng, 3, 3);
    let mut scaled = ops.clone();
    let factor = 7.5;
    let b = ops.b_tilde.clone();
    scaled.b_tilde = Arc::new(move |x1, x2, y| b(x1, x2, y) * factor);
    let j = ops.b_tilde_jacobian.clone().unwrap();
    scaled.b_tilde_jacobian = Some(Arc::new(move |x1, x2, y| j(x1, x2, y) * factor));
    scaled.y0_star = &ops.y0_star * factor;
    scaled.lipschitz_b_y *= factor;
    scaled.constants.alpha_b *= factor;
    let tol = 1e-12;
    for _ in 0..10 {
        let x = gaussian(&mut rng, 3);
        let a = solve_r(&ops, &x, &x, &newton(tol)).unwrap();
        let c = solve_r(&scaled, &x, &x, &newton(tol * factor)).unwrap();
        assert!((a - c).norm() <= 10.0 * tol / ops.constants.alpha_b);
    }
}

#[test]
fn translation_composes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t = |u: &DVector<f64>| u.map(f64::tanh) + u * 2.0;
    let a = gaussian(&mut rng, 3);
    let b = gaussian(&mut rng, 3);
    let ab = translate(translate(t, b.clone()), a.clone());
    let sum = translate(t, &a + &b);
    let zero = translate(t, DVector::zeros(3));
    for _ in 0..100 {
        let u = gaussian(&mut rng, 3);
        assert!((ab.apply(&u) - sum.apply(&u)).amax() < 1e-14);
        assert_eq!(zero.apply(&u), t(&u));
    }
}

#[test]
fn decoupled_monotonicity_ratio_is_at_least_alpha_a() {
    let mut ops = scalar_closed_form();
    ops.a_tilde = Arc::new(|x1, _, _| x1 * 2.0);
    ops.b_tilde = Arc::new(|_, _, y| y * 2.0);
    ops.constants = ConstantsRecord::new(2.0, 0.0, 2.0, 0.0);
    let mut sampler = PairSampler::new(1, 1.0);
    let rep = verify_reduction_estimates(&ops, &mut sampler, 100, &newton(1e-14)).unwrap();
    assert!(rep.passes());
    assert!(rep.worst_s_ratio >= 2.0 - 1e-12);
}

#[test]
fn linear_tanh_family_within_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let ops = random_linear_tanh(&mut rng, 4, 4);
    let mut sampler = PairSampler::new(2, 1.0);
    let rep = verify_reduction_estimates(&ops, &mut sampler, 10_000, &newton(1e-13)).unwrap();
    assert!(rep.passes(), "{rep:?}");
    let s1 = check_s1(&ops, &mut sampler, 1000, &newton(1e-13)).unwrap();
    assert!(s1.passes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn r_is_lipschitz_in_first_argument(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = random_linear_tanh(&mut rng, 3, 2);
        let x1 = gaussian(&mut rng, 3);
        let x2 = gaussian(&mut rng, 3);
        let settings = newton(1e-13);
        let r1 = solve_r(&ops, &x1, &x2, &settings).unwrap();
        let r2 = solve_r(&ops, &x2, &x2, &settings).unwrap();
        let bound = ops.constants.r_lipschitz() * (&x1 - &x2).norm();
        prop_assert!((r1 - r2).norm() <= bound + 1e-11);
    }
}
