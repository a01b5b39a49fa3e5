//! Gaussian barycenters in closed form, Gaussian fixtures, and error metrics.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::random_stiefel;
use crate::measures::DiscreteMeasure;

const SYMMETRY_TOL: f64 = 1e-12;
const NEGATIVE_EIGEN_TOL: f64 = 1e-8;
const CLAMP_REL: f64 = 1e-12;

fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(shape_err(format!("expected a square matrix, got {:?}", a.shape())));
    }
    let scale = a.amax().max(1.0);
    if symmetry_defect(a) > SYMMETRY_TOL * scale {
        return Err(PrwbError::InvalidValue(format!("matrix is not symmetric (defect {:e})", symmetry_defect(a))));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&covariance)?;
        if covariance.nrows() != mean.len() {
            return Err(shape_err(format!("mean length {} vs covariance {:?}", mean.len(), covariance.shape())));
        }
        let eig = SymmetricEigen::new(covariance.clone());
        let lo = eig.eigenvalues.min();
        if lo < -1e-10 * eig.eigenvalues.amax().max(1.0) {
            return Err(PrwbError::InvalidValue(format!("covariance has eigenvalue {lo:e}")));
        }
        Ok(Self { mean, covariance })
    }

    pub fn centered(covariance: DMatrix<f64>) -> Result<Self> {
        let d = covariance.nrows();
        Self::new(DVector::zeros(d), covariance)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density up to the additive constant shared by all points.
    fn log_density_unnormalized(&self, chol: &Cholesky<f64, nalgebra::Dyn>, x: &DVector<f64>) -> f64 {
        let z = chol.l().solve_lower_triangular(&(x - &self.mean)).expect("triangular factor is invertible");
        -0.5 * z.norm_squared()
    }
}

/// Eigen-decomposition with eigenvalues clamped at `1e-12 · λ_max`;
/// returns `(eigenvectors, clamped eigenvalues, clamping happened)`.
fn clamped_eigen(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, bool)> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max().max(0.0);
    let lo = eig.eigenvalues.min();
    if lo < -NEGATIVE_EIGEN_TOL * max.max(1.0) {
        return Err(PrwbError::InvalidValue(format!("matrix has eigenvalue {lo:e}")));
    }
    let floor = CLAMP_REL * max;
    let mut clamped = false;
    let vals = eig.eigenvalues.map(|l| {
        if l < floor {
            clamped = true;
            0.0
        } else {
            l
        }
    });
    Ok((eig.eigenvectors, vals, clamped))
}

fn from_eigen(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let out = vectors * DMatrix::from_diagonal(values) * vectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix.
pub fn spd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vectors, values, _) = clamped_eigen(a)?;
    Ok(from_eigen(&vectors, &values.map(f64::sqrt)))
}

/// `(A)^{1/2}`, adding `1e-12·I` when the spectrum needed clamping.
fn sqrt_with_jitter(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vectors, values, clamped) = clamped_eigen(a)?;
    if clamped {
        let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * 1e-12;
        return spd_sqrt(&jittered);
    }
    Ok(from_eigen(&vectors, &values.map(f64::sqrt)))
}

/// `(S^{1/2}, S^{-1/2})` for strictly positive definite `S`.
fn sqrt_and_inv_sqrt(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (vectors, values, _) = clamped_eigen(s)?;
    if values.iter().any(|l| *l <= 0.0) {
        return Err(PrwbError::InvalidValue("iterate is not positive definite".into()));
    }
    Ok((from_eigen(&vectors, &values.map(f64::sqrt)), from_eigen(&vectors, &values.map(|l| 1.0 / l.sqrt()))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial iterate; identity when `None`.
    pub s0: Option<DMatrix<f64>>,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 1_000, s0: None }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub residual_trace: Vec<f64>,
}

fn check_covs(covs: &[DMatrix<f64>], omega: &DVector<f64>) -> Result<usize> {
    let d = covs.first().ok_or_else(|| PrwbError::InvalidArgument("no covariances".into()))?.nrows();
    if covs.len() != omega.len() {
        return Err(shape_err(format!("{} covariances, {} weights", covs.len(), omega.len())));
    }
    if covs.iter().any(|c| c.shape() != (d, d)) {
        return Err(shape_err("covariances differ in size"));
    }
    Ok(d)
}

/// `Σ_l ω_l (S^{1/2} Σ^l S^{1/2})^{1/2}` given `S^{1/2}`.
fn mean_root(root: &DMatrix<f64>, covs: &[DMatrix<f64>], omega: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = root.nrows();
    let mut acc = DMatrix::zeros(d, d);
    for (c, w) in covs.iter().zip(omega.iter()) {
        let inner = root * c * root;
        acc += sqrt_with_jitter(&((&inner + inner.transpose()) * 0.5))? * *w;
    }
    Ok(acc)
}

/// `‖S − Σ_l ω_l (S^{1/2} Σ^l S^{1/2})^{1/2}‖_F`.
pub fn optimality_residual(s: &DMatrix<f64>, covs: &[DMatrix<f64>], omega: &DVector<f64>) -> Result<f64> {
    check_covs(covs, omega)?;
    let root = spd_sqrt(s)?;
    Ok((s - mean_root(&root, covs, omega)?).norm())
}

/// Barycenter covariance by the fixed-point iteration
/// `S ← S^{-1/2} (Σ_l ω_l (S^{1/2} Σ^l S^{1/2})^{1/2})² S^{-1/2}`.
pub fn gaussian_barycenter_cov(
    covs: &[DMatrix<f64>],
    omega: &DVector<f64>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    let d = check_covs(covs, omega)?;
    if !(cfg.tol > 0.0) {
        return Err(PrwbError::InvalidArgument(format!("tol must be positive, got {}", cfg.tol)));
    }
    let mut s = match &cfg.s0 {
        Some(s0) => {
            if s0.shape() != (d, d) {
                return Err(shape_err("s0 has the wrong size"));
            }
            let (_, values, _) = clamped_eigen(s0)?;
            if values.iter().any(|l| *l <= 0.0) {
                return Err(PrwbError::InvalidValue("s0 is not positive definite".into()));
            }
            s0.clone()
        }
        None => DMatrix::identity(d, d),
    };
    let mut trace = Vec::new();
    for it in 0..=cfg.max_iter {
        let (root, inv_root) = sqrt_and_inv_sqrt(&s)?;
        let m = mean_root(&root, covs, omega)?;
        let residual = (&s - &m).norm();
        if let Some(prev) = trace.last() {
            if residual > *prev {
                log::debug!("fixed-point residual rose from {prev:e} to {residual:e} at iteration {it}");
            }
        }
        trace.push(residual);
        if residual <= cfg.tol {
            return Ok(FixedPointResult { covariance: s, iterations: it, residual, residual_trace: trace });
        }
        if it == cfg.max_iter {
            return Err(PrwbError::NotConverged { iterations: it, residual });
        }
        let next = &inv_root * &m * &m * &inv_root;
        s = (&next + next.transpose()) * 0.5;
    }
    unreachable!()
}

/// `Tr S + Σ_l ω_l Tr Σ^l − 2 Σ_l ω_l Tr (S^{1/2} Σ^l S^{1/2})^{1/2}`.
pub fn gaussian_wb_value(s: &DMatrix<f64>, covs: &[DMatrix<f64>], omega: &DVector<f64>) -> Result<f64> {
    let d = check_covs(covs, omega)?;
    if s.shape() != (d, d) {
        return Err(shape_err("barycenter covariance has the wrong size"));
    }
    let root = spd_sqrt(s)?;
    let cross = mean_root(&root, covs, omega)?.trace();
    let spread: f64 = covs.iter().zip(omega.iter()).map(|(c, w)| w * c.trace()).sum();
    Ok(s.trace() + spread - 2.0 * cross)
}

/// `L` with `L Lᵀ = Σ`: Cholesky, or `V Λ^{1/2}` for singular `Σ`.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok(chol.l());
    }
    let (vectors, values, _) = clamped_eigen(cov)?;
    Ok(vectors * DMatrix::from_diagonal(&values.map(f64::sqrt)))
}

fn draw(g: &GaussianMeasure, n: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(PrwbError::InvalidArgument("sample size must be positive".into()));
    }
    let factor = sampling_factor(g.covariance())?;
    let z = DMatrix::from_fn(g.dim(), n, |_, _| StandardNormal.sample(rng));
    let mut x = factor * z;
    for mut col in x.column_iter_mut() {
        col += g.mean();
    }
    Ok(x)
}

/// `n` seeded draws with weights `1/n`.
pub fn sample_empirical(g: &GaussianMeasure, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscreteMeasure::uniform(draw(g, n, &mut rng)?)
}

/// `n` seeded draws weighted by the Gaussian density at each draw.
pub fn sample_pdf_weighted(g: &GaussianMeasure, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let chol = Cholesky::new(g.covariance().clone())
        .ok_or_else(|| PrwbError::InvalidValue("covariance is singular; density undefined".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = draw(g, n, &mut rng)?;
    weight_by_density(g, &chol, x)
}

fn weight_by_density(
    g: &GaussianMeasure,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    x: DMatrix<f64>,
) -> Result<DiscreteMeasure> {
    let logs: Vec<f64> =
        x.column_iter().map(|c| g.log_density_unnormalized(chol, &c.into_owned())).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    DiscreteMeasure::new(x, DVector::from_iterator(raw.len(), raw.iter().map(|w| w / total)))
}

/// Density weights for given points (used by tests and fixtures).
pub fn density_weights(g: &GaussianMeasure, points: DMatrix<f64>) -> Result<DiscreteMeasure> {
    let chol = Cholesky::new(g.covariance().clone())
        .ok_or_else(|| PrwbError::InvalidValue("covariance is singular; density undefined".into()))?;
    weight_by_density(g, &chol, points)
}

/// `(noisy − clean) / clean`.
pub fn relative_error(obj_noisy: f64, obj_clean: f64) -> Result<f64> {
    if obj_clean == 0.0 {
        return Err(PrwbError::InvalidArgument("clean objective is zero".into()));
    }
    Ok((obj_noisy - obj_clean) / obj_clean)
}

/// `|true − sampled|`.
pub fn mee(obj_true: f64, obj_sampled: f64) -> f64 {
    (obj_true - obj_sampled).abs()
}

/// Adds `σ · N(0, I)` to every support coordinate.
pub fn add_noise(mu: &DiscreteMeasure, sigma: f64, seed: u64) -> Result<DiscreteMeasure> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(PrwbError::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(mu.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = mu.support().shape();
    let noise = DMatrix::from_fn(d, n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    });
    mu.with_support(mu.support() + noise)
}

/// Rank-`k_star` covariance `W diag(spikes) Wᵀ` with `W` a seeded random
/// orthonormal `d × k_star` factor.
pub fn spiked_covariance(d: usize, k_star: usize, spikes: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    if spikes.len() != k_star {
        return Err(shape_err(format!("{} spikes for rank {k_star}", spikes.len())));
    }
    if spikes.iter().any(|s| !(*s > 0.0)) {
        return Err(PrwbError::InvalidArgument("spikes must be positive".into()));
    }
    let w = random_stiefel(d, k_star, seed)?;
    let w = w.matrix();
    let c = w * DMatrix::from_diagonal(&DVector::from_column_slice(spikes)) * w.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn sqrt_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(spd_sqrt(&id).unwrap(), id, epsilon = 1e-15);
        assert_abs_diff_eq!(spd_sqrt(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap(), dmatrix![2.0, 0.0; 0.0, 3.0], epsilon = 1e-14);
        assert!(spd_sqrt(&dmatrix![1.0, 2.0; 0.0, 1.0]).is_err());
        assert!(spd_sqrt(&dmatrix![-1.0, 0.0; 0.0, 1.0]).is_err());
    }

    #[test]
    fn barycenter_of_identical_covariances_is_that_covariance() {
        let c = dmatrix![2.0, 0.5; 0.5, 1.0];
        let omega = DVector::from_vec(vec![0.3, 0.7]);
        let out = gaussian_barycenter_cov(&[c.clone(), c.clone()], &omega, &FixedPointConfig::default()).unwrap();
        assert_abs_diff_eq!(out.covariance, c, epsilon = 1e-10);
        assert_abs_diff_eq!(gaussian_wb_value(&out.covariance, &[c.clone(), c], &omega).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn relative_error_and_mee_examples() {
        assert_eq!(relative_error(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(relative_error(2.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(relative_error(1.5, 1.2).unwrap(), 0.25, epsilon = 1e-15);
        assert!(relative_error(1.0, 0.0).is_err());
        assert_eq!(mee(3.0, 5.0), 2.0);
        assert_eq!(mee(5.0, 3.0), 2.0);
        assert_eq!(mee(4.0, 4.0), 0.0);
    }

    #[test]
    fn pdf_weights_follow_density_ratio() {
        let g = GaussianMeasure::centered(dmatrix![1.0]).unwrap();
        let pts = DMatrix::from_row_slice(1, 2, &[0.0, (2.0 * 2f64.ln()).sqrt()]);
        let mu = density_weights(&g, pts).unwrap();
        assert_abs_diff_eq!(mu.weights()[0] / mu.weights()[1], 2.0, epsilon = 1e-12);
        assert_eq!(sample_pdf_weighted(&g, 1, 3).unwrap().weights()[0], 1.0);
        let singular = GaussianMeasure::centered(dmatrix![1.0, 0.0; 0.0, 0.0]).unwrap();
        assert!(sample_pdf_weighted(&singular, 3, 0).is_err());
    }

    #[test]
    fn zero_covariance_samples_sit_on_the_mean() {
        let g = GaussianMeasure::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::zeros(2, 2)).unwrap();
        let mu = sample_empirical(&g, 5, 11).unwrap();
        for col in mu.support().column_iter() {
            assert_eq!(col[0], 1.0);
            assert_eq!(col[1], -2.0);
        }
        assert!(mu.weights().iter().all(|w| *w == 0.2));
    }

    #[test]
    fn noise_keeps_weights() {
        let mu = DiscreteMeasure::new(dmatrix![0.0, 1.0, 2.0], DVector::from_vec(vec![0.2, 0.3, 0.5])).unwrap();
        assert_eq!(add_noise(&mu, 0.0, 1).unwrap(), mu);
        let noisy = add_noise(&mu, 2.0, 1).unwrap();
        assert_eq!(noisy.weights(), mu.weights());
        assert_ne!(noisy.support(), mu.support());
        assert!(add_noise(&mu, -1.0, 1).is_err());
    }

    #[test]
    fn spiked_covariance_has_requested_rank() {
        let c = spiked_covariance(6, 2, &[3.0, 1.0], 5).unwrap();
        let sv = c.singular_values();
        let mut sorted: Vec<f64> = sv.iter().cloned().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_abs_diff_eq!(sorted[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sorted[1], 1.0, epsilon = 1e-12);
        assert!(sorted[2..].iter().all(|s| *s < 1e-10));
    }
}
