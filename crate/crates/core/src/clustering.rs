//! Free-support barycenters, D2/PD2 clustering of discrete measures, and
//! adjusted mutual information.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropic::{ibp_solve_wb, ot_distance, wb_objective, EntropicParams, PlanSet};
use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::StiefelPoint;
use crate::measures::{cost_matrix, lower_median, merge_supports, DiscreteMeasure, MeasureSet};
use crate::rbcd::{default_eta, rbcd_solve, RbcdParams};

/// `y_j = Σ_l ω_l Σ_i π^l_ij x^l_i / q_j`.
///
/// Columns with `q_j = 0` keep their `fallback` location, or raise an error
/// when no fallback is given.
pub fn update_support(
    set: &MeasureSet,
    plans: &PlanSet,
    q: &DVector<f64>,
    fallback: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    if plans.len() != set.len() {
        return Err(shape_err(format!("{} plans for {} measures", plans.len(), set.len())));
    }
    let d = set.dim();
    let n_y = q.len();
    if plans.plans().iter().any(|p| p.shape() != (set.support_size(), n_y)) {
        return Err(shape_err("plan shapes do not match the measures and q"));
    }
    let mut acc = DMatrix::zeros(d, n_y);
    for ((mu, plan), w) in set.measures().iter().zip(plans.plans()).zip(set.omega().iter()) {
        acc += mu.support() * plan * *w;
    }
    for j in 0..n_y {
        if q[j] > 0.0 {
            let scale = 1.0 / q[j];
            acc.column_mut(j).scale_mut(scale);
        } else {
            match fallback {
                Some(prev) if prev.shape() == (d, n_y) => acc.set_column(j, &prev.column(j)),
                Some(_) => return Err(shape_err("fallback support has the wrong shape")),
                None => return Err(PrwbError::InvalidValue(format!("barycenter atom {j} carries no mass"))),
            }
        }
    }
    Ok(acc)
}

/// Output of the free-support loops.
#[derive(Debug, Clone)]
pub struct FreeSupportResult {
    /// Support `Y` with weights `q`.
    pub barycenter: DiscreteMeasure,
    pub plans: PlanSet,
    pub q: DVector<f64>,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub rounds: usize,
    /// Final projector (projected variant only).
    pub u: Option<StiefelPoint>,
}

struct Round {
    plans: PlanSet,
    q: DVector<f64>,
    objective: f64,
    u: Option<StiefelPoint>,
}

fn free_support_loop<F>(set: &MeasureSet, y0: &DiscreteMeasure, max_rounds: usize, mut solve: F) -> Result<FreeSupportResult>
where
    F: FnMut(&DiscreteMeasure) -> Result<Round>,
{
    if max_rounds == 0 {
        return Err(PrwbError::InvalidArgument("max_rounds must be positive".into()));
    }
    if y0.dim() != set.dim() {
        return Err(shape_err(format!("Y0 has dimension {}, measures {}", y0.dim(), set.dim())));
    }
    let mut y = y0.clone();
    let mut best: Option<(DiscreteMeasure, Round)> = None;
    let mut trace = Vec::new();
    for r in 0..max_rounds {
        let round = solve(&y)?;
        if let Some((_, prev)) = &best {
            if round.objective > prev.objective {
                log::debug!("free-support objective rose at round {r}; keeping the previous iterate");
                break;
            }
        }
        trace.push(round.objective);
        let next = update_support(set, &round.plans, &round.q, Some(y.support()))?;
        let moved = (&next - y.support()).amax();
        let current = DiscreteMeasure::new(y.support().clone(), round.q.clone())?;
        best = Some((current, round));
        if moved == 0.0 {
            break;
        }
        y = DiscreteMeasure::new(next, y.weights().clone())?;
    }
    let (barycenter, round) = best.expect("at least one round");
    Ok(FreeSupportResult {
        barycenter,
        plans: round.plans,
        q: round.q,
        objective: round.objective,
        rounds: trace.len(),
        objective_trace: trace,
        u: round.u,
    })
}

/// Alternates fixed-support IBP with the closed-form support update; stops at
/// the first objective increase (returning the iterate before it).
pub fn free_support_wb(
    set: &MeasureSet,
    y0: &DiscreteMeasure,
    inner: &EntropicParams,
    max_rounds: usize,
) -> Result<FreeSupportResult> {
    free_support_loop(set, y0, max_rounds, |y| {
        let out = ibp_solve_wb(set, y, inner)?;
        let objective = wb_objective(set, y, &out.plans)?;
        Ok(Round { plans: out.plans, q: out.q, objective, u: None })
    })
}

/// [`free_support_wb`] with RBCD as the fixed-support solver.
pub fn free_support_rprwb(
    set: &MeasureSet,
    y0: &DiscreteMeasure,
    rbcd: &RbcdParams,
    max_rounds: usize,
) -> Result<FreeSupportResult> {
    free_support_loop(set, y0, max_rounds, |y| {
        let report = rbcd_solve(set, y, rbcd)?;
        Ok(Round { plans: report.plans, q: report.q, objective: report.objective, u: Some(report.u_hat) })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterVariant {
    Plain,
    Projected { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    /// Centroid support size; seeds are merged down to it.
    pub n_support: usize,
    pub max_rounds: usize,
    /// Free-support rounds per centroid refit.
    pub refit_rounds: usize,
    pub epsilon: f64,
    /// Labeling regularization; `0.5 · median cost` per pair when `None`.
    pub eta_label: Option<f64>,
    pub tau: f64,
    pub max_iter: usize,
}

impl ClusterParams {
    pub fn new(n_support: usize) -> Self {
        Self {
            n_support,
            max_rounds: 50,
            refit_rounds: 5,
            epsilon: 1e-2,
            eta_label: None,
            tau: crate::rbcd::DEFAULT_TAU,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub labels: Vec<usize>,
    pub centroids: Vec<DiscreteMeasure>,
    /// `Σ_i W(Q_{label_i}, μ_i)` after each labeling step.
    pub objective_trace: Vec<f64>,
    /// Labels after each labeling step.
    pub label_trace: Vec<Vec<usize>>,
    pub rounds: usize,
}

fn pair_distance(centroid: &DiscreteMeasure, mu: &DiscreteMeasure, params: &ClusterParams) -> Result<f64> {
    let eta = match params.eta_label {
        Some(eta) => eta,
        None => {
            let mut costs: Vec<f64> = cost_matrix(mu, centroid)?.into_entries().iter().cloned().collect();
            let med = lower_median(&mut costs);
            if med > 0.0 {
                0.5 * med
            } else {
                1.0
            }
        }
    };
    let ep = EntropicParams::new(eta, params.epsilon)?.with_max_iter(params.max_iter);
    Ok(ot_distance(centroid, mu, &ep)?.distance)
}

fn as_centroid(mu: &DiscreteMeasure, n_support: usize) -> Result<DiscreteMeasure> {
    merge_supports(mu, n_support)
}

/// D2 (plain) or PD2 (projected) clustering of `measures` into `k_clusters`.
pub fn d2_cluster(
    measures: &[DiscreteMeasure],
    k_clusters: usize,
    variant: ClusterVariant,
    params: &ClusterParams,
    seed: u64,
) -> Result<ClusterState> {
    let n_total = measures.len();
    if k_clusters == 0 || k_clusters > n_total {
        return Err(PrwbError::InvalidArgument(format!("need 1 <= K <= N, got K={k_clusters}, N={n_total}")));
    }
    let n = measures[0].len();
    if measures.iter().any(|m| m.len() != n || m.dim() != measures[0].dim()) {
        return Err(shape_err("measures must share dimension and support size; see merge_supports"));
    }
    if params.n_support == 0 {
        return Err(PrwbError::InvalidArgument("n_support must be positive".into()));
    }

    let mut centroids = seed_centroids(measures, k_clusters, params, seed)?;
    let mut labels: Vec<usize> = Vec::new();
    let mut objective_trace = Vec::new();
    let mut label_trace = Vec::new();
    let mut rounds = 0;

    for round in 0..params.max_rounds {
        rounds = round + 1;
        let mut new_labels = Vec::with_capacity(n_total);
        let mut dists = Vec::with_capacity(n_total);
        for mu in measures {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let dist = pair_distance(c, mu, params)?;
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            new_labels.push(best.0);
            dists.push(best.1);
        }
        repair_empty(&mut new_labels, &mut dists, &mut centroids, measures, params)?;
        objective_trace.push(dists.iter().sum());
        label_trace.push(new_labels.clone());
        let stable = new_labels == labels;
        labels = new_labels;
        if stable {
            break;
        }
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<DiscreteMeasure> =
                labels.iter().zip(measures).filter(|(l, _)| **l == j).map(|(_, m)| m.clone()).collect();
            let set = MeasureSet::uniform(members)?;
            let eta = default_eta(&set, centroid)?;
            let refit = match variant {
                ClusterVariant::Plain => {
                    let inner = EntropicParams::new(eta, params.epsilon)?.with_max_iter(params.max_iter);
                    free_support_wb(&set, centroid, &inner, params.refit_rounds)?
                }
                ClusterVariant::Projected { k } => {
                    let mut rp = RbcdParams::new(k.min(set.dim()), params.tau * eta, eta, params.epsilon);
                    rp.max_iter = params.max_iter;
                    rp.seed = seed.wrapping_add(j as u64);
                    free_support_rprwb(&set, centroid, &rp, params.refit_rounds)?
                }
            };
            *centroid = refit.barycenter;
        }
    }
    Ok(ClusterState { labels, centroids, objective_trace, label_trace, rounds })
}

/// k-means++-style seeding: first centroid uniform, later ones drawn with
/// probability proportional to the distance to the nearest chosen seed.
fn seed_centroids(
    measures: &[DiscreteMeasure],
    k_clusters: usize,
    params: &ClusterParams,
    seed: u64,
) -> Result<Vec<DiscreteMeasure>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..measures.len());
    let mut chosen = vec![first];
    let mut centroids = vec![as_centroid(&measures[first], params.n_support)?];
    let mut nearest: Vec<f64> =
        measures.iter().map(|m| pair_distance(&centroids[0], m, params)).collect::<Result<_>>()?;
    while centroids.len() < k_clusters {
        let total: f64 = nearest.iter().enumerate().filter(|(i, _)| !chosen.contains(i)).map(|(_, d)| d.max(0.0)).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                if chosen.contains(&i) {
                    continue;
                }
                target -= d.max(0.0);
                pick = Some(i);
                if target <= 0.0 {
                    break;
                }
            }
            pick.expect("an unchosen measure exists")
        } else {
            (0..measures.len()).find(|i| !chosen.contains(i)).expect("K <= N")
        };
        chosen.push(pick);
        let c = as_centroid(&measures[pick], params.n_support)?;
        for (i, m) in measures.iter().enumerate() {
            nearest[i] = nearest[i].min(pair_distance(&c, m, params)?);
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Reseeds every empty cluster from the measure farthest from its centroid.
fn repair_empty(
    labels: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [DiscreteMeasure],
    measures: &[DiscreteMeasure],
    params: &ClusterParams,
) -> Result<()> {
    for j in 0..centroids.len() {
        if labels.contains(&j) {
            continue;
        }
        let counts = |labels: &[usize], c: usize| labels.iter().filter(|l| **l == c).count();
        let far = (0..labels.len())
            .filter(|&i| counts(labels, labels[i]) > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(i) = far else { continue };
        log::info!("cluster {j} is empty; reseeding from measure {i}");
        centroids[j] = as_centroid(&measures[i], params.n_support)?;
        labels[i] = j;
        dists[i] = pair_distance(&centroids[j], &measures[i], params)?;
    }
    Ok(())
}

/// Cluster assignments relabelled in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<usize>,
}

impl Partition {
    pub fn new(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(PrwbError::InvalidArgument("empty partition".into()));
        }
        let mut map = HashMap::new();
        let assignments = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Self { assignments })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.assignments.iter().max().map_or(0, |m| m + 1)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for a in &self.assignments {
            sizes[*a] += 1;
        }
        sizes
    }

    /// `H(V) = −Σ P(i) log P(i)`.
    pub fn entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.sizes().iter().map(|&s| s as f64 / n).map(|p| -p * p.ln()).sum()
    }
}

fn contingency(a: &Partition, b: &Partition) -> DMatrix<usize> {
    let mut table = DMatrix::zeros(a.num_clusters(), b.num_clusters());
    for (i, j) in a.assignments.iter().zip(&b.assignments) {
        table[(*i, *j)] += 1;
    }
    table
}

/// `MI(V₁, V₂) = Σ_ij P(i, j) log(P(i, j) / (P(i) P(j)))`.
pub fn mutual_information(a: &Partition, b: &Partition) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("partitions of {} and {} items", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let table = contingency(a, b);
    let (ra, rb) = (a.sizes(), b.sizes());
    let mut mi = 0.0;
    for i in 0..table.nrows() {
        for j in 0..table.ncols() {
            let nij = table[(i, j)] as f64;
            if nij > 0.0 {
                mi += nij / n * (n * nij / (ra[i] as f64 * rb[j] as f64)).ln();
            }
        }
    }
    Ok(mi)
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut table = vec![0.0; n + 1];
    for k in 1..=n {
        table[k] = table[k - 1] + (k as f64).ln();
    }
    table
}

/// Expected mutual information under the hypergeometric model with both
/// marginals fixed.
pub fn expected_mutual_information(a: &Partition, b: &Partition) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("partitions of {} and {} items", a.len(), b.len())));
    }
    let n = a.len();
    let nf = n as f64;
    let lf = log_factorials(n);
    let mut emi = 0.0;
    for &ai in &a.sizes() {
        for &bj in &b.sizes() {
            let lo = (ai + bj).saturating_sub(n).max(1);
            for nij in lo..=ai.min(bj) {
                let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                let x = nij as f64;
                emi += x / nf * (nf * x / (ai as f64 * bj as f64)).ln() * log_p.exp();
            }
        }
    }
    Ok(emi)
}

/// `AMI = (MI − E[MI]) / ((H(V₁) + H(V₂))/2 − E[MI])`.
///
/// Degenerate cases (zero denominator) score 1 for equal partitions and 0
/// otherwise. Rounding noise in `(−1e-9, 0)` is clamped to 0; larger negative
/// values mean worse-than-chance agreement and are returned as is.
pub fn ami(a: &Partition, b: &Partition) -> Result<f64> {
    let mi = mutual_information(a, b)?;
    let emi = expected_mutual_information(a, b)?;
    let denom = 0.5 * (a.entropy() + b.entropy()) - emi;
    if denom.abs() < 1e-15 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    let score = (mi - emi) / denom;
    Ok(if score < 0.0 && score > -1e-9 { 0.0 } else { score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn line(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(DMatrix::from_row_slice(1, points.len(), points), DVector::from_column_slice(weights))
            .unwrap()
    }

    #[test]
    fn diagonal_plan_reproduces_support() {
        let x = DiscreteMeasure::uniform(dmatrix![0.0, 1.0, 5.0; 2.0, -1.0, 3.0]).unwrap();
        let set = MeasureSet::uniform(vec![x.clone()]).unwrap();
        let plans = PlanSet::new(vec![DMatrix::from_diagonal_element(3, 3, 1.0 / 3.0)]).unwrap();
        let q = DVector::from_element(3, 1.0 / 3.0);
        assert_abs_diff_eq!(update_support(&set, &plans, &q, None).unwrap(), x.support().clone(), epsilon = 1e-15);
    }

    #[test]
    fn zero_mass_atom_needs_fallback() {
        let x = line(&[0.0, 1.0], &[0.5, 0.5]);
        let set = MeasureSet::uniform(vec![x]).unwrap();
        let plans = PlanSet::new(vec![dmatrix![0.5, 0.0; 0.5, 0.0]]).unwrap();
        let q = DVector::from_vec(vec![1.0, 0.0]);
        assert!(update_support(&set, &plans, &q, None).is_err());
        let prev = dmatrix![7.0, 9.0];
        let y = update_support(&set, &plans, &q, Some(&prev)).unwrap();
        assert_abs_diff_eq!(y, dmatrix![0.5, 9.0], epsilon = 1e-15);
    }

    #[test]
    fn one_point_barycenter_is_the_mean() {
        let a = line(&[0.0], &[1.0]);
        let b = line(&[2.0], &[1.0]);
        let set = MeasureSet::uniform(vec![a, b]).unwrap();
        let y0 = line(&[5.0], &[1.0]);
        let inner = EntropicParams::new(1.0, 1e-3).unwrap();
        let out = free_support_wb(&set, &y0, &inner, 10).unwrap();
        assert_abs_diff_eq!(out.barycenter.support()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.objective, 1.0, epsilon = 1e-12);
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn partition_canonicalizes_labels() {
        let p = Partition::new(&[5, 5, 2, 9, 2]).unwrap();
        assert_eq!(p.assignments(), &[0, 0, 1, 2, 1]);
        assert_eq!(p.num_clusters(), 3);
        assert!(Partition::new(&[]).is_err());
    }

    #[test]
    fn ami_examples() {
        let a = Partition::new(&[0, 0, 1, 1, 2, 2]).unwrap();
        let b = Partition::new(&[1, 1, 0, 0, 3, 3]).unwrap();
        assert_abs_diff_eq!(ami(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ami(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        let one = Partition::new(&[0, 0, 0]).unwrap();
        assert_eq!(ami(&one, &one).unwrap(), 1.0);
        let split = Partition::new(&[0, 1, 1]).unwrap();
        assert_eq!(ami(&one, &split).unwrap(), 0.0);
        assert!(ami(&a, &one).is_err());
    }

    #[test]
    fn ami_of_orthogonal_split_is_negative() {
        // MI = 0 while E[MI] = log(2)/3 > 0
        let a = Partition::new(&[0, 0, 1, 1]).unwrap();
        let b = Partition::new(&[0, 1, 0, 1]).unwrap();
        assert_abs_diff_eq!(mutual_information(&a, &b).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_mutual_information(&a, &b).unwrap(), 2f64.ln() / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ami(&a, &b).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_cluster_puts_every_label_at_zero() {
        let ms: Vec<_> = (0..4).map(|i| line(&[i as f64, i as f64 + 0.5], &[0.5, 0.5])).collect();
        let state = d2_cluster(&ms, 1, ClusterVariant::Plain, &ClusterParams::new(2), 0).unwrap();
        assert!(state.labels.iter().all(|l| *l == 0));
    }
}
