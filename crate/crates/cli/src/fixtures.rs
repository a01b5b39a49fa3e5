//! Synthetic measure sets used by the experiment drivers.

use nalgebra::{DMatrix, DVector};
use prwb_core::gaussian::{sample_empirical, sample_pdf_weighted, spiked_covariance, GaussianMeasure};
use prwb_core::measures::{DiscreteMeasure, MeasureSet};
use prwb_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Sampling;

/// Deterministic child seed for a numbered sub-task.
pub fn sub_seed(base: u64, tag: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(tag)
}

fn sample(g: &GaussianMeasure, n: usize, sampling: Sampling, seed: u64) -> Result<DiscreteMeasure> {
    match sampling {
        Sampling::Empirical => sample_empirical(g, n, seed),
        Sampling::Pdf => sample_pdf_weighted(g, n, seed),
    }
}

/// `m` centered Gaussians with rank-`k_star` covariances, `n` samples each.
pub fn spiked_set(
    d: usize,
    n: usize,
    m: usize,
    k_star: usize,
    spikes: &[f64],
    sampling: Sampling,
    seed: u64,
) -> Result<(MeasureSet, Vec<DMatrix<f64>>)> {
    let ones = vec![1.0; k_star];
    let spikes = if spikes.is_empty() { &ones[..] } else { spikes };
    let mut covs = Vec::with_capacity(m);
    let mut measures = Vec::with_capacity(m);
    for l in 0..m as u64 {
        let c = spiked_covariance(d, k_star, spikes, sub_seed(seed, 2 * l))?;
        measures.push(sample(&GaussianMeasure::centered(c.clone())?, n, sampling, sub_seed(seed, 2 * l + 1))?);
        covs.push(c);
    }
    Ok((MeasureSet::uniform(measures)?, covs))
}

/// Diagonal covariances `Σ^l = floor·I` with `Σ^l(l, l) = spike`.
pub fn diagonal_spike_covs(d: usize, m: usize, spike: f64, floor: f64) -> Vec<DMatrix<f64>> {
    (0..m)
        .map(|l| {
            let mut diag = DVector::from_element(d, floor);
            diag[l % d] = spike;
            DMatrix::from_diagonal(&diag)
        })
        .collect()
}

pub fn sample_set(covs: &[DMatrix<f64>], n: usize, sampling: Sampling, seed: u64) -> Result<MeasureSet> {
    let measures = covs
        .iter()
        .enumerate()
        .map(|(l, c)| sample(&GaussianMeasure::centered(c.clone())?, n, sampling, sub_seed(seed, l as u64)))
        .collect::<Result<Vec<_>>>()?;
    MeasureSet::uniform(measures)
}

/// `n` uniform points in `[−half, half]^d` with uniform weights.
pub fn uniform_box(d: usize, n: usize, half: f64, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscreteMeasure::uniform(DMatrix::from_fn(d, n, |_, _| rng.random_range(-half..=half)))
}

/// `groups · per_group` point clouds of `n` points. Group `g` is centered at
/// `separation · e_g` (or along the first axis when `d < groups`), each cloud
/// shifted by a small random offset and jittered. Returns measures in
/// interleaved group order with their true labels.
pub fn cluster_measures(
    d: usize,
    n: usize,
    groups: usize,
    per_group: usize,
    separation: f64,
    jitter: f64,
    seed: u64,
) -> Result<(Vec<DiscreteMeasure>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |g: usize| {
        let mut c = DVector::zeros(d);
        if d >= groups {
            c[g] = separation;
        } else {
            c[0] = separation * g as f64;
        }
        c
    };
    let mut measures = Vec::with_capacity(groups * per_group);
    let mut labels = Vec::with_capacity(groups * per_group);
    for i in 0..groups * per_group {
        let g = i % groups;
        let offset = DVector::from_fn(d, |_, _| rng.random_range(-jitter..=jitter));
        let c = center(g) + offset;
        let support = DMatrix::from_fn(d, n, |r, _| c[r] + rng.random_range(-jitter..=jitter));
        measures.push(DiscreteMeasure::uniform(support)?);
        labels.push(g);
    }
    Ok((measures, labels))
}
