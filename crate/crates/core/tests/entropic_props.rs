mod common;

use nalgebra::{DMatrix, DVector};
use prwb_core::entropic::*;
use prwb_core::manifold::{random_stiefel, StiefelPoint};
use prwb_core::measures::{max_cost, projected_cost, DiscreteMeasure, MeasureSet};
use proptest::prelude::*;

fn simplex(n: usize, seed: u64) -> DVector<f64> {
    let w = common::random_matrix(n, 1, seed).map(|x| x.abs() + 0.01);
    let total = w.sum();
    DVector::from_column_slice((w / total).as_slice())
}

fn random_duals(m: usize, n: usize, seed: u64) -> DualPotentials {
    DualPotentials::from_matrices(&common::random_matrix(m, n, seed), &common::random_matrix(m, n, seed + 1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rounding_is_exact_and_close(seed in 0u64..100_000, n in 1usize..11, n2 in 1usize..11, scale in 0.1f64..3.0) {
        let plan = common::random_matrix(n, n2, seed).map(|x| x.abs() * scale / (n * n2) as f64);
        let p = simplex(n, seed + 1);
        let q = simplex(n2, seed + 2);
        let out = round_plan(&plan, &p, &q).unwrap();
        prop_assert!(out.iter().all(|x| *x >= 0.0));
        prop_assert!((out.column_sum() - &p).amax() <= 1e-12);
        prop_assert!((out.row_sum().transpose() - &q).amax() <= 1e-12);
        let bound = 2.0 * ((plan.column_sum() - &p).lp_norm(1) + (plan.row_sum().transpose() - &q).lp_norm(1));
        prop_assert!((&out - &plan).lp_norm(1) <= bound + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ibp_decreases_dual_and_respects_lower_bound(seed in 0u64..10_000, d in 2usize..6, n in 2usize..6, m in 1usize..4) {
        let (set, y) = common::fixture(d, n, m, seed);
        let u = random_stiefel(d, 1 + d / 2, seed).unwrap();
        let eta = 0.05;
        let c_bar = max_cost(&set, &y).unwrap();
        let mut it = IbpIteration::new(&set, &y, &u, eta).unwrap();
        let mut prev = it.dual_value();
        for _ in 0..200 {
            it.step().unwrap();
            let g = it.dual_value();
            prop_assert!(g <= prev + 1e-9, "{} -> {}", prev, g);
            prop_assert!(g >= -c_bar / eta - 1e-9);
            prop_assert!(it.duals().centering_defect(set.omega()) <= 1e-9);
            prev = g;
        }
    }

    #[test]
    fn v_step_decrease_dominates_squared_spread(seed in 0u64..10_000, d in 2usize..5, n in 2usize..6, m in 2usize..4) {
        let (set, y) = common::fixture(d, n, m, seed);
        let u = random_stiefel(d, 1, seed).unwrap();
        let eta = 0.2;
        let mut duals = u_update(&DualPotentials::zeros(m, n), &set, &y, &u, eta).unwrap();
        for _ in 0..30 {
            let before = dual_objective(&set, &y, &duals, &u, eta).unwrap();
            let step = v_update(&duals, &set, &y, &u, eta).unwrap();
            let q_bar = step.marginals.iter().zip(set.omega().iter()).fold(DVector::zeros(n), |acc, (q, w)| acc + q * *w);
            let spread: f64 = step.marginals.iter().zip(set.omega().iter()).map(|(q, w)| w * (q - &q_bar).lp_norm(1)).sum();
            let after = dual_objective(&set, &y, &step.duals, &u, eta).unwrap();
            prop_assert!(before - after >= spread * spread / 11.0 - 1e-9, "decrease {} spread {}", before - after, spread);
            duals = u_update(&step.duals, &set, &y, &u, eta).unwrap();
        }
    }

    #[test]
    fn u_update_normalizes_every_zeta(seed in 0u64..10_000, d in 1usize..5, n in 1usize..6, m in 1usize..4) {
        let (set, y) = common::fixture(d, n, m, seed);
        let u = random_stiefel(d, 1, seed).unwrap();
        let eta = 0.3;
        let duals = u_update(&random_duals(m, n, seed), &set, &y, &u, eta).unwrap();
        for (l, mu) in set.measures().iter().enumerate() {
            let cost = projected_cost(mu, &y, &u).unwrap();
            let (zeta, _) = zeta_and_plan(&duals.u()[l], &duals.v()[l], &cost, eta).unwrap();
            prop_assert!((zeta.sum() - 1.0).abs() <= 1e-12);
            prop_assert!((zeta.column_sum() - mu.weights()).amax() <= 1e-12);
        }
    }
}

fn fd_fixture() -> (MeasureSet, DiscreteMeasure, StiefelPoint) {
    let (set, y) = common::fixture(4, 3, 2, 21);
    (set, y, random_stiefel(4, 2, 5).unwrap())
}

#[test]
fn dual_gradient_matches_finite_differences() {
    let (set, y, u) = fd_fixture();
    let eta = 0.4;
    let duals = random_duals(2, 3, 77);
    let (gu, gv) = dual_gradient(&set, &y, &duals, &u, eta).unwrap();
    let h = 1e-6;
    let g_at = |d: &DualPotentials| dual_objective(&set, &y, d, &u, eta).unwrap();
    for l in 0..2 {
        for i in 0..3 {
            let mut plus = duals.clone();
            let mut minus = duals.clone();
            plus.u_mut()[l][i] += h;
            minus.u_mut()[l][i] -= h;
            let fd = (g_at(&plus) - g_at(&minus)) / (2.0 * h);
            assert!((fd - gu[(l, i)]).abs() <= 1e-6, "u[{l}][{i}]: {fd} vs {}", gu[(l, i)]);

            let mut plus = duals.clone();
            let mut minus = duals.clone();
            plus.v_mut()[l][i] += h;
            minus.v_mut()[l][i] -= h;
            let fd = (g_at(&plus) - g_at(&minus)) / (2.0 * h);
            assert!((fd - gv[(l, i)]).abs() <= 1e-6, "v[{l}][{i}]: {fd} vs {}", gv[(l, i)]);
        }
    }
}

#[test]
fn primal_dual_identity_after_u_update() {
    let (set, y, u) = fd_fixture();
    for (eta, seed) in [(0.1, 1), (0.5, 2), (2.0, 3)] {
        let duals = u_update(&random_duals(2, 3, seed), &set, &y, &u, eta).unwrap();
        let plans = dual_plans(&set, &y, &duals, &u, eta).unwrap();
        let f_eta = regularized_objective(&set, &y, &plans, &u, eta).unwrap();
        let g = dual_objective(&set, &y, &duals, &u, eta).unwrap();
        let coupling: f64 = plans
            .plans()
            .iter()
            .zip(duals.v())
            .zip(set.omega().iter())
            .map(|((pi, v), w)| w * v.dot(&pi.row_sum().transpose()))
            .sum();
        let rhs = -eta * g + eta * coupling - eta;
        assert!((f_eta - rhs).abs() <= 1e-8, "eta {eta}: {f_eta} vs {rhs}");
    }
}

#[test]
fn zero_cost_single_measure_gives_max_entropy_plan() {
    let x = DMatrix::from_element(2, 4, 0.3);
    let p = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let mu = DiscreteMeasure::new(x.clone(), p.clone()).unwrap();
    let set = MeasureSet::uniform(vec![mu]).unwrap();
    let y = DiscreteMeasure::uniform(x).unwrap();
    let out = ibp_solve_wb(&set, &y, &EntropicParams::new(0.5, 1e-3).unwrap()).unwrap();
    assert!(out.converged);
    let expected = DMatrix::from_fn(4, 4, |i, _| p[i] / 4.0);
    assert!((out.plans.plans()[0].clone() - expected).amax() <= 1e-8);
    assert!((out.q.clone() - DVector::from_element(4, 0.25)).amax() <= 1e-8);
}

#[test]
fn mirrored_measures_give_mirrored_barycenter() {
    let a = DiscreteMeasure::new(DMatrix::from_row_slice(1, 3, &[-2.0, -0.5, 1.0]), DVector::from_vec(vec![0.2, 0.5, 0.3]))
        .unwrap();
    let b = DiscreteMeasure::new(DMatrix::from_row_slice(1, 3, &[2.0, 0.5, -1.0]), DVector::from_vec(vec![0.2, 0.5, 0.3]))
        .unwrap();
    let set = MeasureSet::uniform(vec![a, b]).unwrap();
    let y = DiscreteMeasure::uniform(DMatrix::from_row_slice(1, 5, &[-1.5, -0.7, 0.0, 0.7, 1.5])).unwrap();
    let out = ibp_solve_wb(&set, &y, &EntropicParams::new(0.3, 1e-2).unwrap()).unwrap();
    assert!(out.converged);
    assert!(out.residual <= out.threshold);
    for j in 0..5 {
        assert!((out.q[j] - out.q[4 - j]).abs() <= 1e-8, "{:?}", out.q);
    }
}

#[test]
fn ibp_output_is_feasible_with_shared_marginal() {
    let (set, y) = common::fixture(5, 4, 3, 11);
    let u = random_stiefel(5, 2, 0).unwrap();
    let out = ibp_solve(&set, &y, &u, &EntropicParams::new(0.1, 0.05).unwrap()).unwrap();
    assert!(out.converged);
    assert!(out.residual <= out.threshold);
    assert!(out.plans.is_feasible(&set));
    assert_eq!(out.plans.shared_marginal(), Some(&out.q));
    assert!((out.q.sum() - 1.0).abs() <= 1e-12);
}
