//! Discrete measures, measure sets, and the squared-Euclidean cost matrices
//! built from them.
//!
//! A [`DiscreteMeasure`] stores its support as a `d × n` matrix (one column per
//! atom) and a weight vector on the probability simplex. A [`MeasureSet`]
//! groups `m` measures sharing `d` and `n` together with barycenter weights
//! `omega`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::StiefelPoint;

/// Weight vectors whose sum is off by at most this much are renormalized on
/// construction; anything further off is rejected.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(weights: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if weights.is_empty() {
        return Err(PrwbError::InvalidArgument(format!("{what} is empty")));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(PrwbError::InvalidValue(format!("{what} has non-finite entry {w}")));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0) {
        return Err(PrwbError::NotOnSimplex(format!("{what} has negative entry {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(PrwbError::NotOnSimplex(format!("{what} sums to {total}")));
    }
    // Summation rounding alone is left untouched so that stored weights
    // survive a save/load cycle bit-for-bit.
    if (total - 1.0).abs() <= 1e-14 {
        return Ok(weights.clone());
    }
    Ok(weights / total)
}

/// A finitely supported probability measure `Σ_i p_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    support: DMatrix<f64>,
    weights: DVector<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from a `d × n` support and `n` weights.
    ///
    /// Weights within [`SIMPLEX_TOL`] of the simplex are renormalized.
    pub fn new(support: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if support.nrows() == 0 || support.ncols() == 0 {
            return Err(PrwbError::InvalidArgument("support must be at least 1 × 1".into()));
        }
        if support.ncols() != weights.len() {
            return Err(shape_err(format!(
                "support has {} points but {} weights",
                support.ncols(),
                weights.len()
            )));
        }
        if support.iter().any(|x| !x.is_finite()) {
            return Err(PrwbError::InvalidValue("support has non-finite entries".into()));
        }
        let weights = check_simplex(&weights, "weights")?;
        Ok(Self { support, weights })
    }

    /// Uniform weights `1/n` on the given support.
    pub fn uniform(support: DMatrix<f64>) -> Result<Self> {
        let n = support.ncols();
        Self::new(support, DVector::from_element(n, 1.0 / n.max(1) as f64))
    }

    /// Builds a measure from a list of points (each of length `d`).
    pub fn from_points(points: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        let d = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != d) {
            return Err(shape_err("points have differing dimensions"));
        }
        let support = DMatrix::from_fn(d, points.len(), |r, c| points[c][r]);
        Self::new(support, DVector::from_column_slice(weights))
    }

    pub fn dim(&self) -> usize {
        self.support.nrows()
    }

    /// Number of support points.
    pub fn len(&self) -> usize {
        self.support.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.support.ncols() == 0
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Replaces the support, keeping the weights.
    pub fn with_support(&self, support: DMatrix<f64>) -> Result<Self> {
        Self::new(support, self.weights.clone())
    }

    /// Weighted mean `Σ_i p_i x_i`.
    pub fn mean(&self) -> DVector<f64> {
        &self.support * &self.weights
    }
}

/// `m` measures sharing dimension and support size, with barycenter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSet {
    measures: Vec<DiscreteMeasure>,
    omega: DVector<f64>,
}

impl MeasureSet {
    pub fn new(measures: Vec<DiscreteMeasure>, omega: DVector<f64>) -> Result<Self> {
        let first = measures
            .first()
            .ok_or_else(|| PrwbError::InvalidArgument("measure set is empty".into()))?;
        let (d, n) = (first.dim(), first.len());
        for (l, mu) in measures.iter().enumerate() {
            if mu.dim() != d {
                return Err(shape_err(format!("measure {l} has dimension {} (expected {d})", mu.dim())));
            }
            if mu.len() != n {
                return Err(shape_err(format!(
                    "measure {l} has {} support points (expected {n}); equalize with merge_supports",
                    mu.len()
                )));
            }
        }
        if omega.len() != measures.len() {
            return Err(shape_err(format!("{} measures but {} omega entries", measures.len(), omega.len())));
        }
        let omega = check_simplex(&omega, "omega")?;
        if omega.iter().any(|w| *w <= 0.0) {
            return Err(PrwbError::InvalidValue("omega entries must be strictly positive".into()));
        }
        Ok(Self { measures, omega })
    }

    /// Equal barycenter weights `1/m`.
    pub fn uniform(measures: Vec<DiscreteMeasure>) -> Result<Self> {
        let m = measures.len();
        Self::new(measures, DVector::from_element(m, 1.0 / m.max(1) as f64))
    }

    pub fn measures(&self) -> &[DiscreteMeasure] {
        &self.measures
    }

    pub fn omega(&self) -> &DVector<f64> {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Support size shared by every measure.
    pub fn support_size(&self) -> usize {
        self.measures[0].len()
    }

    /// Smallest barycenter weight.
    pub fn omega_min(&self) -> f64 {
        self.omega.min()
    }

    /// Pooled `d × mn` support `[X¹ … Xᵐ]`.
    pub fn pooled_support(&self) -> DMatrix<f64> {
        let (d, n) = (self.dim(), self.support_size());
        let mut pooled = DMatrix::zeros(d, n * self.len());
        for (l, mu) in self.measures.iter().enumerate() {
            pooled.columns_mut(l * n, n).copy_from(mu.support());
        }
        pooled
    }

    pub fn map_measures<F>(&self, f: F) -> Result<Self>
    where
        F: FnMut(&DiscreteMeasure) -> Result<DiscreteMeasure>,
    {
        let measures = self.measures.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(measures, self.omega.clone())
    }
}

/// Matrix of squared distances between the atoms of two measures.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
    max_entry: f64,
}

impl CostMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(PrwbError::InvalidValue("cost entries must be finite and nonnegative".into()));
        }
        let max_entry = entries.iter().copied().fold(0.0, f64::max);
        Ok(Self { entries, max_entry })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn max_entry(&self) -> f64 {
        self.max_entry
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }
}

fn pairwise_sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
        a.column(i)
            .iter()
            .zip(b.column(j).iter())
            .map(|(x, y)| {
                let diff = x - y;
                diff * diff
            })
            .sum()
    })
}

/// `C_ij = ‖x_i − y_j‖²` between the atoms of `mu` (rows) and `y` (columns).
pub fn cost_matrix(mu: &DiscreteMeasure, y: &DiscreteMeasure) -> Result<CostMatrix> {
    if mu.dim() != y.dim() {
        return Err(shape_err(format!("dimension {} vs {}", mu.dim(), y.dim())));
    }
    CostMatrix::new(pairwise_sq_dist(mu.support(), y.support()))
}

/// `M_ij = ‖Uᵀ(x_i − y_j)‖²`.
pub fn projected_cost(mu: &DiscreteMeasure, y: &DiscreteMeasure, u: &StiefelPoint) -> Result<CostMatrix> {
    if mu.dim() != y.dim() || mu.dim() != u.ambient_dim() {
        return Err(shape_err(format!(
            "measure dims {}/{} vs projector rows {}",
            mu.dim(),
            y.dim(),
            u.ambient_dim()
        )));
    }
    let ut = u.matrix().transpose();
    CostMatrix::new(pairwise_sq_dist(&(&ut * mu.support()), &(&ut * y.support())))
}

/// `c̄ = max_l ‖C^l‖_∞`.
pub fn max_cost(set: &MeasureSet, y: &DiscreteMeasure) -> Result<f64> {
    set.measures()
        .iter()
        .map(|mu| cost_matrix(mu, y).map(|c| c.max_entry()))
        .try_fold(0.0, |acc, c| c.map(|c| f64::max(acc, c)))
}

/// Lower median of all entries of every `C^l`.
pub fn median_cost(set: &MeasureSet, y: &DiscreteMeasure) -> Result<f64> {
    let mut all = Vec::with_capacity(set.len() * set.support_size() * y.len());
    for mu in set.measures() {
        all.extend(cost_matrix(mu, y)?.entries().iter().copied());
    }
    Ok(lower_median(&mut all))
}

pub(crate) fn lower_median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Repeatedly merges the pair of atoms minimizing `p_i p_j ‖x_i − x_j‖² / (p_i + p_j)`
/// until at most `n_target` atoms remain.
///
/// The merged atom sits at the weighted mean `(p_i x_i + p_j x_j) / (p_i + p_j)`
/// and carries the combined weight. Ties go to the lexicographically smallest
/// pair `(i, j)`.
pub fn merge_supports(mu: &DiscreteMeasure, n_target: usize) -> Result<DiscreteMeasure> {
    if n_target < 1 {
        return Err(PrwbError::InvalidArgument("n_target must be at least 1".into()));
    }
    if mu.len() <= n_target {
        return Ok(mu.clone());
    }
    let mut points: Vec<DVector<f64>> = mu.support().column_iter().map(|c| c.into_owned()).collect();
    let mut weights: Vec<f64> = mu.weights().iter().copied().collect();

    while points.len() > n_target {
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let (pi, pj) = (weights[i], weights[j]);
                let mass = pi + pj;
                let score = if mass > 0.0 {
                    pi * pj * (&points[i] - &points[j]).norm_squared() / mass
                } else {
                    0.0
                };
                if score < best.0 {
                    best = (score, i, j);
                }
            }
        }
        let (_, i, j) = best;
        let mass = weights[i] + weights[j];
        let merged = if mass > 0.0 {
            (&points[i] * weights[i] + &points[j] * weights[j]) / mass
        } else {
            (&points[i] + &points[j]) * 0.5
        };
        points[i] = merged;
        weights[i] = mass;
        points.remove(j);
        weights.remove(j);
    }

    let support = DMatrix::from_columns(&points);
    DiscreteMeasure::new(support, DVector::from_vec(weights))
}

/// Lloyd's k-means with k-means++ seeding over the pooled support of `set`;
/// returns `n` centroids with uniform weights.
pub fn kmeans_support(set: &MeasureSet, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let pooled = set.pooled_support();
    let centroids = kmeans(&pooled, n, seed, 300)?;
    DiscreteMeasure::uniform(centroids)
}

/// k-means on the columns of `points`; returns a `d × k` centroid matrix.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<DMatrix<f64>> {
    let count = points.ncols();
    if k == 0 || k > count {
        return Err(PrwbError::InvalidArgument(format!(
            "cannot place {k} centroids on {count} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = |c: &DVector<f64>, i: usize| -> f64 {
        c.iter().zip(points.column(i).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    // k-means++ seeding
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; count];
    let first = rng.random_range(0..count);
    chosen[first] = true;
    centroids.push(points.column(first).into_owned());
    let mut nearest: Vec<f64> = (0..count).map(|i| sq(&centroids[0], i)).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in nearest.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                target -= w;
                if target <= 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.or_else(|| (0..count).rev().find(|&i| nearest[i] > 0.0))
        } else {
            None
        };
        // all remaining points coincide with a centroid: take the next unused one
        let pick = pick.unwrap_or_else(|| (0..count).find(|&i| !chosen[i]).unwrap_or(0));
        chosen[pick] = true;
        let c = points.column(pick).into_owned();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq(&c, i));
        }
        centroids.push(c);
    }

    // Lloyd iterations
    let mut labels = vec![usize::MAX; count];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (c, sq(&centroids[c], i)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
                .0;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let d = points.nrows();
        let mut sums = vec![DVector::zeros(d); k];
        let mut counts = vec![0usize; k];
        for (i, &label) in labels.iter().enumerate() {
            sums[label] += points.column(i);
            counts[label] += 1;
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    Ok(DMatrix::from_columns(&centroids))
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasureRecord {
    weights: Vec<f64>,
    support: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasureSetRecord {
    d: usize,
    n: usize,
    m: usize,
    omega: Vec<f64>,
    measures: Vec<MeasureRecord>,
}

/// Parses the canonical JSON measure-set document.
pub fn measure_set_from_json(text: &str) -> Result<MeasureSet> {
    let record: MeasureSetRecord = serde_json::from_str(text).map_err(|e| PrwbError::Parse(e.to_string()))?;
    if record.measures.len() != record.m {
        return Err(shape_err(format!("header m={} but {} measures", record.m, record.measures.len())));
    }
    let mut measures = Vec::with_capacity(record.m);
    for (l, rec) in record.measures.iter().enumerate() {
        if rec.weights.len() != record.n || rec.support.len() != record.n {
            return Err(shape_err(format!(
                "measure {l}: header n={} but {} weights / {} points",
                record.n,
                rec.weights.len(),
                rec.support.len()
            )));
        }
        if rec.support.iter().any(|p| p.len() != record.d) {
            return Err(shape_err(format!("measure {l}: point dimension differs from d={}", record.d)));
        }
        measures.push(DiscreteMeasure::from_points(&rec.support, &rec.weights)?);
    }
    MeasureSet::new(measures, DVector::from_vec(record.omega))
}

/// Serializes to the canonical JSON measure-set document.
pub fn measure_set_to_json(set: &MeasureSet) -> String {
    let record = MeasureSetRecord {
        d: set.dim(),
        n: set.support_size(),
        m: set.len(),
        omega: set.omega().iter().copied().collect(),
        measures: set
            .measures()
            .iter()
            .map(|mu| MeasureRecord {
                weights: mu.weights().iter().copied().collect(),
                support: mu.support().column_iter().map(|c| c.iter().copied().collect()).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&record).expect("measure set serializes")
}

pub fn load_measure_set(path: impl AsRef<Path>) -> Result<MeasureSet> {
    let text = std::fs::read_to_string(path)?;
    measure_set_from_json(&text)
}

pub fn save_measure_set(set: &MeasureSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, measure_set_to_json(set))?;
    Ok(())
}
