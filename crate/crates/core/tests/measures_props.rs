mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use prwb_core::manifold::{random_stiefel, StiefelPoint};
use prwb_core::measures::*;
use proptest::prelude::*;

fn measure(d: usize, n: usize, seed: u64) -> DiscreteMeasure {
    let x = common::random_matrix(d, n, seed);
    let w = common::random_matrix(n, 1, seed + 1).map(|v| v.abs() + 0.05);
    let total = w.sum();
    DiscreteMeasure::new(x, DVector::from_column_slice((w / total).as_slice())).unwrap()
}

fn naive_cost(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.ncols(), y.ncols(), |i, j| (x.column(i) - y.column(j)).norm_squared())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_is_transpose_symmetric(seed in 0u64..10_000, d in 1usize..6, n in 1usize..7, n2 in 1usize..7) {
        let a = measure(d, n, seed);
        let b = measure(d, n2, seed + 7);
        let ab = cost_matrix(&a, &b).unwrap();
        let ba = cost_matrix(&b, &a).unwrap();
        prop_assert!((ab.entries() - ba.entries().transpose()).amax() <= 1e-14);
        prop_assert!((ab.entries() - naive_cost(a.support(), b.support())).amax() <= 1e-12);
        prop_assert_eq!(ab.max_entry(), ab.entries().max());
    }

    #[test]
    fn projection_contracts_costs(seed in 0u64..10_000, d in 1usize..6, n in 1usize..6, k_off in 0usize..6) {
        let k = 1 + k_off % d;
        let a = measure(d, n, seed);
        let b = measure(d, n, seed + 3);
        let u = random_stiefel(d, k, seed).unwrap();
        let c = cost_matrix(&a, &b).unwrap();
        let p = projected_cost(&a, &b, &u).unwrap();
        for (pi, ci) in p.entries().iter().zip(c.entries().iter()) {
            prop_assert!(*pi >= 0.0 && *pi <= ci + 1e-12);
        }
        let full = projected_cost(&a, &b, &random_stiefel(d, d, seed + 11).unwrap()).unwrap();
        prop_assert!((full.entries() - c.entries()).amax() <= 1e-10);
    }

    #[test]
    fn projected_cost_ignores_rotation_within_subspace(seed in 0u64..10_000, d in 2usize..6, n in 1usize..6) {
        let k = d / 2 + 1;
        let a = measure(d, n, seed);
        let b = measure(d, n, seed + 5);
        let u = random_stiefel(d, k, seed).unwrap();
        let r = random_stiefel(k, k, seed + 9).unwrap();
        let ur = StiefelPoint::new(u.matrix() * r.matrix()).unwrap();
        let p1 = projected_cost(&a, &b, &u).unwrap();
        let p2 = projected_cost(&a, &b, &ur).unwrap();
        prop_assert!((p1.entries() - p2.entries()).amax() <= 1e-10);
    }

    #[test]
    fn every_merge_step_keeps_mass_and_mean(seed in 0u64..10_000, d in 1usize..4, n in 2usize..9) {
        let mut mu = measure(d, n, seed);
        while mu.len() > 1 {
            let next = merge_supports(&mu, mu.len() - 1).unwrap();
            prop_assert_eq!(next.len(), mu.len() - 1);
            prop_assert!((next.weights().sum() - 1.0).abs() <= 1e-12);
            prop_assert!((next.mean() - mu.mean()).amax() <= 1e-12);
            mu = next;
        }
    }

    #[test]
    fn json_round_trip_is_exact(seed in 0u64..10_000, d in 1usize..4, n in 1usize..5, m in 1usize..4) {
        let measures = (0..m).map(|l| measure(d, n, seed + 13 * l as u64)).collect();
        let set = MeasureSet::uniform(measures).unwrap();
        let text = measure_set_to_json(&set);
        let back = measure_set_from_json(&text).unwrap();
        prop_assert_eq!(measure_set_to_json(&back), text);
        for (a, b) in set.measures().iter().zip(back.measures()) {
            prop_assert_eq!(a.support(), b.support());
            prop_assert_eq!(a.weights(), b.weights());
        }
    }
}

#[test]
fn file_round_trip() {
    let set = MeasureSet::uniform(vec![measure(3, 4, 1), measure(3, 4, 2)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.json");
    save_measure_set(&set, &path).unwrap();
    let first = std::fs::read_to_string(&path).unwrap();
    let back = load_measure_set(&path).unwrap();
    save_measure_set(&back, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), first);
    assert!(load_measure_set(dir.path().join("missing.json")).is_err());
}

#[test]
fn kmeans_finds_separated_cluster_means() {
    let a = DiscreteMeasure::uniform(DMatrix::from_row_slice(2, 3, &[0.0, 0.2, 0.1, 0.0, 0.1, 0.2])).unwrap();
    let b = DiscreteMeasure::uniform(DMatrix::from_row_slice(2, 3, &[9.0, 9.2, 9.1, 9.0, 9.1, 9.2])).unwrap();
    let set = MeasureSet::uniform(vec![a, b]).unwrap();
    let y = kmeans_support(&set, 2, 3).unwrap();
    let mut centers: Vec<(f64, f64)> = y.support().column_iter().map(|c| (c[0], c[1])).collect();
    centers.sort_by(|p, q| p.0.total_cmp(&q.0));
    assert_abs_diff_eq!(centers[0].0, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(centers[0].1, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(centers[1].0, 9.1, epsilon = 1e-12);
    assert_abs_diff_eq!(centers[1].1, 9.1, epsilon = 1e-12);
}
