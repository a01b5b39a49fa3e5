#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use prwb_core::gaussian::{sample_empirical, spiked_covariance, GaussianMeasure};
use prwb_core::measures::{kmeans_support, DiscreteMeasure, MeasureSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random measures with points in `[0, 2/√d]^d` and positive weights, plus a
/// uniform barycenter support of the same size.
pub fn fixture(d: usize, n: usize, m: usize, seed: u64) -> (MeasureSet, DiscreteMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 2.0 / (d as f64).sqrt();
    let measures = (0..m)
        .map(|_| {
            let x = DMatrix::from_fn(d, n, |_, _| rng.random::<f64>() * scale);
            let w = DVector::from_fn(n, |_, _| 0.5 + rng.random::<f64>());
            let total = w.sum();
            DiscreteMeasure::new(x, w / total).unwrap()
        })
        .collect();
    let omega = DVector::from_fn(m, |_, _| 0.5 + rng.random::<f64>());
    let total = omega.sum();
    let y = DiscreteMeasure::uniform(DMatrix::from_fn(d, n, |_, _| rng.random::<f64>() * scale)).unwrap();
    (MeasureSet::new(measures, omega / total).unwrap(), y)
}

/// Empirical samples of rank-`k_star` Gaussians with a k-means barycenter support.
pub fn spiked(d: usize, n: usize, m: usize, k_star: usize, seed: u64) -> (MeasureSet, DiscreteMeasure) {
    let measures = (0..m)
        .map(|l| {
            let c = spiked_covariance(d, k_star, &vec![1.0; k_star], seed * 100 + l as u64).unwrap();
            sample_empirical(&GaussianMeasure::centered(c).unwrap(), n, seed * 100 + 50 + l as u64).unwrap()
        })
        .collect();
    let set = MeasureSet::uniform(measures).unwrap();
    let y = kmeans_support(&set, n, seed).unwrap();
    (set, y)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}
