//! Entropic barycenter objectives, their duals, and the solvers built on them.
//!
//! For a fixed projector `U` the inner problem
//! `min_{π ∈ Π(p)} Σ_l ω_l (⟨M^l(U), π^l⟩ − η H(π^l))`
//! has the dual
//! `g(u, v, U) = Σ_l ω_l { log Σ_ij ζ^l_ij − ⟨u^l, p^l⟩ }` with
//! `ζ^l_ij = exp(−M^l_ij / η + u^l_i + v^l_j)`.
//!
//! Potentials `u`, `v` are log-scale already, so every sum of `ζ` entries is
//! evaluated as a log-sum-exp. With `log_domain_shift` the maximum is
//! subtracted first; without it the plain sum is tried and the solver falls
//! back to the shifted form as soon as it over- or underflows.
//!
//! Rows with `p_i = 0` carry `u_i = −∞`; they never receive mass.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::StiefelPoint;
use crate::measures::{cost_matrix, max_cost, projected_cost, CostMatrix, DiscreteMeasure, MeasureSet};

/// Tolerance used when flagging a plan set as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// `m` transport plans `π^l` (rows indexed by the atoms of `μ^l`, columns by
/// the barycenter atoms), optionally with their shared column marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    plans: Vec<DMatrix<f64>>,
    shared_marginal: Option<DVector<f64>>,
}

impl PlanSet {
    pub fn new(plans: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(bad) = plans.iter().flat_map(|p| p.iter()).find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(PrwbError::InvalidValue(format!("plan entry {bad} is not a finite nonnegative number")));
        }
        if let Some(first) = plans.first() {
            if plans.iter().any(|p| p.shape() != first.shape()) {
                return Err(shape_err("plans have differing shapes"));
            }
        }
        Ok(Self { plans, shared_marginal: None })
    }

    pub fn with_marginal(plans: Vec<DMatrix<f64>>, q: DVector<f64>) -> Result<Self> {
        let mut set = Self::new(plans)?;
        if set.plans.iter().any(|p| p.ncols() != q.len()) {
            return Err(shape_err("shared marginal length differs from plan columns"));
        }
        set.shared_marginal = Some(q);
        Ok(set)
    }

    pub fn plans(&self) -> &[DMatrix<f64>] {
        &self.plans
    }

    pub fn shared_marginal(&self) -> Option<&DVector<f64>> {
        self.shared_marginal.as_ref()
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Largest per-measure `‖π𝟙 − p‖₁ + ‖πᵀ𝟙 − q‖₁`, with `q` the shared
    /// marginal (or the first plan's column sums when none is stored).
    pub fn feasibility_error(&self, set: &MeasureSet) -> f64 {
        let q = match (&self.shared_marginal, self.plans.first()) {
            (Some(q), _) => q.clone(),
            (None, Some(p)) => p.row_sum().transpose(),
            (None, None) => return 0.0,
        };
        self.plans
            .iter()
            .zip(set.measures())
            .map(|(plan, mu)| {
                (plan.column_sum() - mu.weights()).lp_norm(1) + (plan.row_sum().transpose() - &q).lp_norm(1)
            })
            .fold(0.0, f64::max)
    }

    /// Membership in `Π(p)` to [`FEASIBILITY_TOL`].
    pub fn is_feasible(&self, set: &MeasureSet) -> bool {
        self.plans.len() == set.len() && self.feasibility_error(set) <= FEASIBILITY_TOL
    }
}

/// Dual potentials `u^l, v^l ∈ ℝⁿ`, one pair per measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    u: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
}

impl DualPotentials {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self::zeros_rect(m, n, n)
    }

    /// Zero potentials for `n_x` source atoms and `n_y` barycenter atoms.
    pub fn zeros_rect(m: usize, n_x: usize, n_y: usize) -> Self {
        Self { u: vec![DVector::zeros(n_x); m], v: vec![DVector::zeros(n_y); m] }
    }

    /// Builds potentials from `m × n` matrices (row `l` holds `u^l`/`v^l`).
    pub fn from_matrices(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        if u.nrows() != v.nrows() {
            return Err(shape_err("u and v cover different numbers of measures"));
        }
        Ok(Self {
            u: u.row_iter().map(|r| r.transpose()).collect(),
            v: v.row_iter().map(|r| r.transpose()).collect(),
        })
    }

    pub fn u(&self) -> &[DVector<f64>] {
        &self.u
    }

    pub fn v(&self) -> &[DVector<f64>] {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.v
    }

    pub fn u_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.u)
    }

    pub fn v_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.v)
    }

    /// `‖Σ_l ω_l v^l‖_∞`.
    pub fn centering_defect(&self, omega: &DVector<f64>) -> f64 {
        let n = self.v.first().map_or(0, DVector::len);
        let mut acc = DVector::<f64>::zeros(n);
        for (v, w) in self.v.iter().zip(omega.iter()) {
            acc += v * *w;
        }
        acc.amax()
    }
}

fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.first().map_or(0, DVector::len);
    DMatrix::from_fn(rows.len(), n, |l, i| rows[l][i])
}

/// Regularization weight, target accuracy, and iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropicParams {
    pub eta: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub log_domain_shift: bool,
}

impl EntropicParams {
    pub const DEFAULT_MAX_ITER: usize = 100_000;

    pub fn new(eta: f64, epsilon: f64) -> Result<Self> {
        let params = Self { eta, epsilon, max_iter: Self::DEFAULT_MAX_ITER, log_domain_shift: true };
        params.validate()?;
        Ok(params)
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PrwbError::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PrwbError::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(PrwbError::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }

    /// IBP stopping threshold `η ε² / (200 c̄³)`; infinite when `c̄ = 0`.
    pub fn ibp_threshold(&self, c_bar: f64) -> f64 {
        if c_bar > 0.0 {
            self.eta * self.epsilon * self.epsilon / (200.0 * c_bar.powi(3))
        } else {
            f64::INFINITY
        }
    }
}

/// log-sum-exp of `f(0..len)`.
fn lse_shifted<F: Fn(usize) -> f64>(len: usize, f: F) -> f64 {
    let max = (0..len).map(&f).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + (0..len).map(|i| (f(i) - max).exp()).sum::<f64>().ln()
}

fn lse_plain<F: Fn(usize) -> f64>(len: usize, f: F) -> f64 {
    (0..len).map(|i| f(i).exp()).sum::<f64>().ln()
}

/// Per-measure log-kernels `−M^l / η` for one fixed projector, and the
/// closed-form block updates on top of them.
pub(crate) struct Engine<'a> {
    set: &'a MeasureSet,
    log_kernels: Vec<DMatrix<f64>>,
    log_p: Vec<DVector<f64>>,
    eta: f64,
    stabilized: Cell<bool>,
}

pub(crate) struct VStep {
    pub log_marginals: Vec<DVector<f64>>,
    pub log_geometric_mean: DVector<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(
        set: &'a MeasureSet,
        y: &DiscreteMeasure,
        u: Option<&StiefelPoint>,
        eta: f64,
        log_domain_shift: bool,
    ) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(PrwbError::InvalidArgument(format!("eta must be positive, got {eta}")));
        }
        if y.dim() != set.dim() {
            return Err(shape_err(format!("barycenter dimension {} vs {}", y.dim(), set.dim())));
        }
        let log_p = set
            .measures()
            .iter()
            .map(|mu| mu.weights().map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }))
            .collect();
        let mut engine = Self {
            set,
            log_kernels: Vec::new(),
            log_p,
            eta,
            stabilized: Cell::new(log_domain_shift),
        };
        engine.set_projection(y, u)?;
        Ok(engine)
    }

    pub fn set_projection(&mut self, y: &DiscreteMeasure, u: Option<&StiefelPoint>) -> Result<()> {
        let costs = self
            .set
            .measures()
            .iter()
            .map(|mu| match u {
                Some(u) => projected_cost(mu, y, u),
                None => cost_matrix(mu, y),
            })
            .collect::<Result<Vec<CostMatrix>>>()?;
        let eta = self.eta;
        self.log_kernels = costs.into_iter().map(|c| c.into_entries() / -eta).collect();
        Ok(())
    }

    #[cfg(test)]
    pub fn stabilized(&self) -> bool {
        self.stabilized.get()
    }

    fn lse<F: Fn(usize) -> f64>(&self, len: usize, f: F) -> f64 {
        if !self.stabilized.get() {
            let plain = lse_plain(len, &f);
            if plain.is_finite() {
                return plain;
            }
            log::debug!("log-sum-exp left the floating range; switching to the shifted form");
            self.stabilized.set(true);
        }
        lse_shifted(len, f)
    }

    fn row_lse(&self, l: usize, v: &DVector<f64>) -> DVector<f64> {
        let k = &self.log_kernels[l];
        DVector::from_fn(k.nrows(), |i, _| self.lse(k.ncols(), |j| k[(i, j)] + v[j]))
    }

    fn col_lse(&self, l: usize, u: &DVector<f64>) -> DVector<f64> {
        let k = &self.log_kernels[l];
        DVector::from_fn(k.ncols(), |j, _| {
            let col = k.column(j);
            self.lse(k.nrows(), |i| col[i] + u[i])
        })
    }

    fn inner_product_up(&self, l: usize, u: &DVector<f64>) -> f64 {
        let p = self.set.measures()[l].weights();
        u.iter().zip(p.iter()).filter(|(_, p)| **p > 0.0).map(|(u, p)| u * p).sum()
    }

    /// `log ‖ζ^l‖₁` for measure `l`.
    fn log_mass(&self, l: usize, duals: &DualPotentials) -> f64 {
        let rows = self.row_lse(l, &duals.v[l]);
        let u = &duals.u[l];
        self.lse(rows.len(), |i| u[i] + rows[i])
    }

    pub fn dual_value(&self, duals: &DualPotentials) -> f64 {
        (0..self.set.len())
            .map(|l| self.set.omega()[l] * (self.log_mass(l, duals) - self.inner_product_up(l, &duals.u[l])))
            .sum()
    }

    /// Row-marginal projection; returns `g` at the incoming potentials.
    pub fn u_update(&self, duals: &mut DualPotentials) -> Result<f64> {
        let mut g = 0.0;
        for l in 0..self.set.len() {
            let rows = self.row_lse(l, &duals.v[l]);
            let u = &duals.u[l];
            let mass = self.lse(rows.len(), |i| u[i] + rows[i]);
            g += self.set.omega()[l] * (mass - self.inner_product_up(l, u));
            let log_p = &self.log_p[l];
            if let Some(i) = (0..rows.len()).find(|&i| log_p[i].is_finite() && !rows[i].is_finite()) {
                return Err(PrwbError::Numerical(format!("measure {l}: row {i} of ζ has no mass")));
            }
            duals.u[l] = DVector::from_fn(rows.len(), |i, _| {
                if log_p[i].is_finite() {
                    log_p[i] - rows[i]
                } else {
                    f64::NEG_INFINITY
                }
            });
        }
        Ok(g)
    }

    /// Column-marginal projection onto the weighted geometric mean.
    /// `log q^l = log ζ^lᵀ𝟙` for every measure.
    pub fn column_log_marginals(&self, duals: &DualPotentials) -> Result<Vec<DVector<f64>>> {
        (0..self.set.len())
            .map(|l| {
                let log_q = self.col_lse(l, &duals.u[l]) + &duals.v[l];
                match log_q.iter().position(|x| !x.is_finite()) {
                    Some(j) => Err(PrwbError::Numerical(format!("measure {l}: column {j} of ζ has no mass"))),
                    None => Ok(log_q),
                }
            })
            .collect()
    }

    /// Column-marginal projection onto the weighted geometric mean.
    pub fn v_update(&self, duals: &mut DualPotentials) -> Result<VStep> {
        let log_marginals = self.column_log_marginals(duals)?;
        Ok(self.v_update_with(duals, log_marginals))
    }

    /// [`Engine::v_update`] given the current column log-marginals.
    pub fn v_update_with(&self, duals: &mut DualPotentials, log_marginals: Vec<DVector<f64>>) -> VStep {
        let n = self.log_kernels.first().map_or(0, DMatrix::ncols);
        let mut log_geometric_mean = DVector::zeros(n);
        for (lq, w) in log_marginals.iter().zip(self.set.omega().iter()) {
            log_geometric_mean += lq * *w;
        }
        for (v, lq) in duals.v.iter_mut().zip(&log_marginals) {
            *v += &log_geometric_mean - lq;
        }
        VStep { log_marginals, log_geometric_mean }
    }

    /// `π^l = ζ^l / ‖ζ^l‖₁`.
    pub fn plans(&self, duals: &DualPotentials) -> Vec<DMatrix<f64>> {
        (0..self.set.len())
            .map(|l| {
                let k = &self.log_kernels[l];
                let (u, v) = (&duals.u[l], &duals.v[l]);
                let mass = self.log_mass(l, duals);
                DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| (k[(i, j)] + u[i] + v[j] - mass).exp())
            })
            .collect()
    }
}

fn check_duals(set: &MeasureSet, y: &DiscreteMeasure, duals: &DualPotentials) -> Result<()> {
    let (m, n) = (set.len(), set.support_size());
    if duals.u.len() != m || duals.v.len() != m {
        return Err(shape_err(format!("potentials for {} measures, expected {m}", duals.u.len())));
    }
    if duals.u.iter().any(|u| u.len() != n) || duals.v.iter().any(|v| v.len() != y.len()) {
        return Err(shape_err("potential length differs from support size"));
    }
    Ok(())
}

fn check_plan_shapes(set: &MeasureSet, y: &DiscreteMeasure, plans: &PlanSet) -> Result<()> {
    if plans.len() != set.len() {
        return Err(shape_err(format!("{} plans for {} measures", plans.len(), set.len())));
    }
    let shape = (set.support_size(), y.len());
    if plans.plans().iter().any(|p| p.shape() != shape) {
        return Err(shape_err(format!("plans must be {shape:?}")));
    }
    Ok(())
}

/// `f(π, U) = Σ_l ω_l ⟨M^l(U), π^l⟩`.
pub fn primal_objective(set: &MeasureSet, y: &DiscreteMeasure, plans: &PlanSet, u: &StiefelPoint) -> Result<f64> {
    check_plan_shapes(set, y, plans)?;
    let mut total = 0.0;
    for ((mu, plan), w) in set.measures().iter().zip(plans.plans()).zip(set.omega().iter()) {
        total += w * projected_cost(mu, y, u)?.entries().dot(plan);
    }
    Ok(total)
}

/// Unprojected barycenter objective `Σ_l ω_l ⟨C^l, π^l⟩`.
pub fn wb_objective(set: &MeasureSet, y: &DiscreteMeasure, plans: &PlanSet) -> Result<f64> {
    check_plan_shapes(set, y, plans)?;
    let mut total = 0.0;
    for ((mu, plan), w) in set.measures().iter().zip(plans.plans()).zip(set.omega().iter()) {
        total += w * cost_matrix(mu, y)?.entries().dot(plan);
    }
    Ok(total)
}

/// `H(π) = −Σ_ij (π_ij log π_ij − π_ij)` with `0 log 0 = 0`.
pub fn entropy(plan: &DMatrix<f64>) -> Result<f64> {
    let mut h = 0.0;
    for &p in plan.iter() {
        if !(p >= 0.0) {
            return Err(PrwbError::InvalidValue(format!("negative plan entry {p}")));
        }
        if p > 0.0 {
            h -= p * p.ln() - p;
        }
    }
    Ok(h)
}

/// `f_η(π, U) = Σ_l ω_l (⟨M^l(U), π^l⟩ − η H(π^l))`.
pub fn regularized_objective(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    plans: &PlanSet,
    u: &StiefelPoint,
    eta: f64,
) -> Result<f64> {
    let primal = primal_objective(set, y, plans, u)?;
    let mut ent = 0.0;
    for (plan, w) in plans.plans().iter().zip(set.omega().iter()) {
        ent += w * entropy(plan)?;
    }
    Ok(primal - eta * ent)
}

/// `ζ_ij = exp(−M_ij/η + u_i + v_j)` and the normalized plan `ζ / ‖ζ‖₁`.
pub fn zeta_and_plan(
    u: &DVector<f64>,
    v: &DVector<f64>,
    cost: &CostMatrix,
    eta: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = cost.entries();
    if m.nrows() != u.len() || m.ncols() != v.len() {
        return Err(shape_err(format!("cost {:?} vs potentials {}/{}", m.shape(), u.len(), v.len())));
    }
    if !(eta > 0.0) {
        return Err(PrwbError::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let log_zeta = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| -m[(i, j)] / eta + u[i] + v[j]);
    let total = lse_shifted(log_zeta.len(), |idx| log_zeta[idx]);
    if !total.is_finite() {
        return Err(PrwbError::Numerical(format!("log ‖ζ‖₁ = {total}")));
    }
    let zeta = log_zeta.map(f64::exp);
    if zeta.iter().any(|z| !z.is_finite()) {
        return Err(PrwbError::Numerical("ζ overflows f64".into()));
    }
    let plan = log_zeta.map(|x| (x - total).exp());
    Ok((zeta, plan))
}

/// `g(u, v, U)`.
pub fn dual_objective(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    duals: &DualPotentials,
    u: &StiefelPoint,
    eta: f64,
) -> Result<f64> {
    check_duals(set, y, duals)?;
    let engine = Engine::new(set, y, Some(u), eta, true)?;
    Ok(engine.dual_value(duals))
}

/// Partial derivatives `(∂g/∂u, ∂g/∂v)`, row `l` per measure:
/// `∂g/∂u^l = ω_l (π^l𝟙 − p^l)` and `∂g/∂v^l = ω_l π^lᵀ𝟙`.
pub fn dual_gradient(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    duals: &DualPotentials,
    u: &StiefelPoint,
    eta: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_duals(set, y, duals)?;
    let engine = Engine::new(set, y, Some(u), eta, true)?;
    let plans = engine.plans(duals);
    let gu: Vec<DVector<f64>> = plans
        .iter()
        .zip(set.measures())
        .zip(set.omega().iter())
        .map(|((pi, mu), w)| (pi.column_sum() - mu.weights()) * *w)
        .collect();
    let gv: Vec<DVector<f64>> =
        plans.iter().zip(set.omega().iter()).map(|(pi, w)| pi.row_sum().transpose() * *w).collect();
    Ok((stack_rows(&gu), stack_rows(&gv)))
}

/// Plans `π(u, v, U)` induced by the potentials.
pub fn dual_plans(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    duals: &DualPotentials,
    u: &StiefelPoint,
    eta: f64,
) -> Result<PlanSet> {
    check_duals(set, y, duals)?;
    PlanSet::new(Engine::new(set, y, Some(u), eta, true)?.plans(duals))
}

/// Closed-form minimization of `g` over `u`: `u^l ← u^l + log(p^l / ζ^l𝟙)`.
pub fn u_update(
    duals: &DualPotentials,
    set: &MeasureSet,
    y: &DiscreteMeasure,
    u: &StiefelPoint,
    eta: f64,
) -> Result<DualPotentials> {
    check_duals(set, y, duals)?;
    let engine = Engine::new(set, y, Some(u), eta, true)?;
    let mut next = duals.clone();
    engine.u_update(&mut next)?;
    Ok(next)
}

/// Result of [`v_update`].
#[derive(Debug, Clone)]
pub struct VUpdate {
    pub duals: DualPotentials,
    /// Column marginals `q^l = ζ(u^l, v^l)ᵀ𝟙` before the update.
    pub marginals: Vec<DVector<f64>>,
    /// Their weighted geometric mean, the common column marginal afterwards.
    pub geometric_mean: DVector<f64>,
}

/// Closed-form minimization of `g` over centered `v`:
/// `v^l ← v^l + log(q_geo / q^l)` with `q_geo = exp(Σ_l ω_l log q^l)`.
pub fn v_update(
    duals: &DualPotentials,
    set: &MeasureSet,
    y: &DiscreteMeasure,
    u: &StiefelPoint,
    eta: f64,
) -> Result<VUpdate> {
    check_duals(set, y, duals)?;
    let engine = Engine::new(set, y, Some(u), eta, true)?;
    let mut next = duals.clone();
    let step = engine.v_update(&mut next)?;
    Ok(VUpdate {
        duals: next,
        marginals: step.log_marginals.iter().map(|lq| lq.map(f64::exp)).collect(),
        geometric_mean: step.log_geometric_mean.map(f64::exp),
    })
}

pub(crate) fn arithmetic_mean(vectors: &[DVector<f64>], omega: &DVector<f64>) -> DVector<f64> {
    let mut mean = DVector::zeros(vectors.first().map_or(0, DVector::len));
    for (q, w) in vectors.iter().zip(omega.iter()) {
        mean += q * *w;
    }
    mean
}

/// `Σ_l ω_l ‖q^l − q̄‖₁` with `q̄ = Σ_l ω_l q^l`; returns `(residual, q̄)`.
pub(crate) fn marginal_spread(vectors: &[DVector<f64>], omega: &DVector<f64>) -> (f64, DVector<f64>) {
    let mean = arithmetic_mean(vectors, omega);
    let spread = vectors.iter().zip(omega.iter()).map(|(q, w)| w * (q - &mean).lp_norm(1)).sum();
    (spread, mean)
}

pub(crate) fn normalized(q: DVector<f64>) -> DVector<f64> {
    let total = q.sum();
    if total > 0.0 {
        q / total
    } else {
        q
    }
}

/// Output of [`ibp_solve`].
#[derive(Debug, Clone)]
pub struct IbpOutput {
    /// Rounded plans, exactly in `Π(p)` with shared marginal `q`.
    pub plans: PlanSet,
    /// Barycenter weights `q̄ = Σ_l ω_l q^l`.
    pub q: DVector<f64>,
    pub duals: DualPotentials,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ_l ω_l ‖q^l − q̄‖₁` at the returned iterate.
    pub residual: f64,
    /// Stopping threshold `η ε² / (200 c̄³)`.
    pub threshold: f64,
    /// Dual value `g` at the returned potentials.
    pub dual_value: f64,
}

/// Iterative Bregman projections at a fixed projector, from `u = v = 0`.
pub fn ibp_solve(set: &MeasureSet, y: &DiscreteMeasure, u: &StiefelPoint, params: &EntropicParams) -> Result<IbpOutput> {
    ibp_solve_from(set, y, Some(u), params, None)
}

/// Unprojected fixed-support barycenter (`U = I`).
pub fn ibp_solve_wb(set: &MeasureSet, y: &DiscreteMeasure, params: &EntropicParams) -> Result<IbpOutput> {
    ibp_solve_from(set, y, None, params, None)
}

/// [`ibp_solve`] with optional projector (`None` = identity) and warm start.
pub fn ibp_solve_from(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    u: Option<&StiefelPoint>,
    params: &EntropicParams,
    init: Option<&DualPotentials>,
) -> Result<IbpOutput> {
    params.validate()?;
    let duals = match init {
        Some(d) => {
            check_duals(set, y, d)?;
            d.clone()
        }
        None => DualPotentials::zeros_rect(set.len(), set.support_size(), y.len()),
    };
    let threshold = params.ibp_threshold(max_cost(set, y)?);
    let engine = Engine::new(set, y, u, params.eta, params.log_domain_shift)?;
    run_ibp(&engine, set, duals, params.max_iter, threshold)
}

pub(crate) fn run_ibp(
    engine: &Engine<'_>,
    set: &MeasureSet,
    mut duals: DualPotentials,
    max_iter: usize,
    threshold: f64,
) -> Result<IbpOutput> {
    let mut best: Option<(f64, DualPotentials, DVector<f64>, usize)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut log_q = engine.column_log_marginals(&duals)?;
    for t in 0..max_iter {
        iterations = t + 1;
        engine.v_update_with(&mut duals, log_q);
        engine.u_update(&mut duals)?;
        // rows now match p, so these marginals carry unit mass
        log_q = engine.column_log_marginals(&duals)?;
        let marginals: Vec<DVector<f64>> = log_q.iter().map(|lq| lq.map(f64::exp)).collect();
        let (residual, q_bar) = marginal_spread(&marginals, set.omega());
        if !residual.is_finite() {
            return Err(PrwbError::Numerical(format!("IBP residual became {residual} at iteration {t}")));
        }
        if residual <= threshold {
            best = Some((residual, duals.clone(), q_bar, iterations));
            converged = true;
            break;
        }
        if best.as_ref().is_none_or(|b| residual < b.0) {
            best = Some((residual, duals.clone(), q_bar, iterations));
        }
    }
    let (residual, duals, q_bar, best_iter) = best.expect("at least one iteration");
    if !converged {
        log::debug!("IBP hit max_iter={max_iter}; best residual {residual:e} at iteration {best_iter}");
    }
    let q = normalized(q_bar);
    let raw = engine.plans(&duals);
    let rounded = raw
        .iter()
        .zip(set.measures())
        .map(|(pi, mu)| round_plan(pi, mu.weights(), &q))
        .collect::<Result<Vec<_>>>()?;
    let dual_value = engine.dual_value(&duals);
    Ok(IbpOutput {
        plans: PlanSet::with_marginal(rounded, q.clone())?,
        q,
        duals,
        iterations,
        converged,
        residual,
        threshold,
        dual_value,
    })
}

/// Rounds `plan` onto `{π ≥ 0 : π𝟙 = p, πᵀ𝟙 = q}`.
pub fn round_plan(plan: &DMatrix<f64>, p: &DVector<f64>, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    if plan.nrows() != p.len() || plan.ncols() != q.len() {
        return Err(shape_err(format!("plan {:?} vs marginals {}/{}", plan.shape(), p.len(), q.len())));
    }
    if plan.iter().any(|v| !(*v >= 0.0)) {
        return Err(PrwbError::InvalidValue("plan has negative or NaN entries".into()));
    }
    let mut out = plan.clone();
    let rows = out.column_sum();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let scale = if rows[i] > p[i] { p[i] / rows[i] } else { 1.0 };
        row *= scale;
    }
    let cols = out.row_sum();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let scale = if cols[j] > q[j] { q[j] / cols[j] } else { 1.0 };
        col *= scale;
    }
    // both are nonnegative in exact arithmetic
    let err_p = (p - out.column_sum()).map(|e| e.max(0.0));
    let err_q = (q - out.row_sum().transpose()).map(|e| e.max(0.0));
    let norm = err_p.lp_norm(1);
    if norm > 0.0 {
        out += &err_p * err_q.transpose() / norm;
    }
    Ok(out)
}

/// Output of [`ot_distance`].
#[derive(Debug, Clone)]
pub struct OtOutput {
    /// `⟨C, π̂⟩` for the rounded plan.
    pub distance: f64,
    pub plan: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Squared 2-Wasserstein cost via log-domain Sinkhorn followed by rounding.
///
/// Stops once `‖π𝟙 − p‖₁ ≤ ε / (8 c̄)` after a column update.
pub fn ot_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure, params: &EntropicParams) -> Result<OtOutput> {
    params.validate()?;
    let cost = cost_matrix(mu, nu)?;
    let c = cost.entries();
    let (p, q) = (mu.weights(), nu.weights());
    let c_bar = cost.max_entry();
    if c_bar == 0.0 {
        let plan = p * q.transpose();
        return Ok(OtOutput { distance: 0.0, plan, iterations: 0, converged: true });
    }
    let tol = params.epsilon / (8.0 * c_bar);
    let eta = params.eta;
    let log_k = c.map(|x| -x / eta);
    let log_w = |w: &DVector<f64>| w.map(|x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY });
    let (log_p, log_q) = (log_w(p), log_w(q));
    let (n_rows, n_cols) = c.shape();
    let mut f = DVector::<f64>::zeros(n_rows);
    let mut g = DVector::<f64>::zeros(n_cols);
    let mut converged = false;
    let mut iterations = 0;
    let mut plan = DMatrix::zeros(n_rows, n_cols);
    for t in 0..params.max_iter {
        iterations = t + 1;
        for i in 0..n_rows {
            f[i] = if log_p[i].is_finite() {
                log_p[i] - lse_shifted(n_cols, |j| log_k[(i, j)] + g[j])
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..n_cols {
            let col = log_k.column(j);
            g[j] = if log_q[j].is_finite() {
                log_q[j] - lse_shifted(n_rows, |i| col[i] + f[i])
            } else {
                f64::NEG_INFINITY
            };
        }
        plan = DMatrix::from_fn(n_rows, n_cols, |i, j| (log_k[(i, j)] + f[i] + g[j]).exp());
        let err = (plan.column_sum() - p).lp_norm(1);
        if !err.is_finite() {
            return Err(PrwbError::Numerical("Sinkhorn marginal error is not finite".into()));
        }
        if err <= tol {
            converged = true;
            break;
        }
    }
    let plan = round_plan(&plan, p, q)?;
    Ok(OtOutput { distance: c.dot(&plan), plan, iterations, converged })
}

/// IBP stepper exposing each v-then-u sweep; used for monotonicity checks.
pub struct IbpIteration<'a> {
    engine: Engine<'a>,
    duals: DualPotentials,
    set: &'a MeasureSet,
}

impl<'a> IbpIteration<'a> {
    pub fn new(set: &'a MeasureSet, y: &DiscreteMeasure, u: &StiefelPoint, eta: f64) -> Result<Self> {
        Ok(Self {
            engine: Engine::new(set, y, Some(u), eta, true)?,
            duals: DualPotentials::zeros_rect(set.len(), set.support_size(), y.len()),
            set,
        })
    }

    /// One v-update followed by one u-update; returns the column marginals
    /// after the sweep and their spread `Σ ω_l ‖q^l − q̄‖₁`.
    pub fn step(&mut self) -> Result<(Vec<DVector<f64>>, f64)> {
        self.engine.v_update(&mut self.duals)?;
        self.engine.u_update(&mut self.duals)?;
        let marginals: Vec<DVector<f64>> =
            self.engine.column_log_marginals(&self.duals)?.iter().map(|lq| lq.map(f64::exp)).collect();
        let (spread, _) = marginal_spread(&marginals, self.set.omega());
        Ok((marginals, spread))
    }

    pub fn duals(&self) -> &DualPotentials {
        &self.duals
    }

    pub fn dual_value(&self) -> f64 {
        self.engine.dual_value(&self.duals)
    }
}
