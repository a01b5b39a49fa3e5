//! Riemannian block coordinate descent on the dual `g(u, v, U)`.
//!
//! Each iteration performs an exact `u`-update, an exact centered `v`-update,
//! and one retraction step `U ← Retr_U(−τ grad_U g)` where
//! `grad_U g = Proj_{T_U}(−(2/η) V_{π(u,v,U)} U)`.

use nalgebra::DVector;

use crate::entropic::{
    ibp_solve, marginal_spread, normalized, primal_objective, round_plan, DualPotentials, EntropicParams, Engine,
    PlanSet,
};
use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::{
    correlation_times, random_stiefel, retract, riemannian_grad_f, tangent_project, StiefelPoint, TangentVector,
};
use crate::measures::{max_cost, median_cost, DiscreteMeasure, MeasureSet};

/// Step size used when none is given.
pub const DEFAULT_TAU: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct RbcdParams {
    /// Projection dimension `k`.
    pub k: usize,
    pub tau: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Replace `eta` and `tau` by [`theoretical_params`] at solve time.
    pub use_theoretical_schedule: bool,
    pub log_domain_shift: bool,
    /// Starting projector; a seeded random point when `None`.
    pub initial_u: Option<StiefelPoint>,
}

impl RbcdParams {
    pub fn new(k: usize, tau: f64, eta: f64, epsilon: f64) -> Self {
        Self {
            k,
            tau,
            eta,
            epsilon,
            max_iter: 20_000,
            seed: 0,
            use_theoretical_schedule: false,
            log_domain_shift: true,
            initial_u: None,
        }
    }

    /// Default step size and `η = 0.5 · median(C)`.
    pub fn with_defaults(set: &MeasureSet, y: &DiscreteMeasure, k: usize, epsilon: f64) -> Result<Self> {
        Ok(Self::new(k, DEFAULT_TAU, default_eta(set, y)?, epsilon))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(PrwbError::InvalidArgument(format!("{name} must be positive, got {x}")))
            }
        };
        positive("eta", self.eta)?;
        positive("epsilon", self.epsilon)?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(PrwbError::InvalidArgument(format!("tau must be nonnegative, got {}", self.tau)));
        }
        if self.max_iter == 0 {
            return Err(PrwbError::InvalidArgument("max_iter must be positive".into()));
        }
        if self.k == 0 {
            return Err(PrwbError::InvalidArgument("k must be positive".into()));
        }
        Ok(())
    }
}

/// `η = 0.5 · lower median of all cost entries`, falling back to 1 when every
/// cost vanishes.
pub fn default_eta(set: &MeasureSet, y: &DiscreteMeasure) -> Result<f64> {
    let med = median_cost(set, y)?;
    Ok(if med > 0.0 { 0.5 * med } else { 1.0 })
}

/// `η = ε / (4 log n + 2)`.
pub fn theoretical_eta(n: usize, epsilon: f64) -> f64 {
    epsilon / (4.0 * (n as f64).ln() + 2.0)
}

/// `ρ = 2c̄/η + 4c̄²/η²`.
pub fn rbcd_rho(c_bar: f64, eta: f64) -> f64 {
    2.0 * c_bar / eta + 4.0 * c_bar * c_bar / (eta * eta)
}

/// Step sizes from the complexity analysis, with both retraction constants
/// set to 1. The resulting `τ = 1/(4c̄/η + ρ)` is a heuristic.
///
/// `k` is left at 1; callers set the projection dimension.
pub fn theoretical_params(n: usize, c_bar: f64, epsilon: f64, omega_min: f64) -> Result<RbcdParams> {
    if n == 0 || !(c_bar >= 0.0) || !(epsilon > 0.0) || !(omega_min > 0.0) {
        return Err(PrwbError::InvalidArgument(format!(
            "theoretical schedule needs positive inputs (n={n}, c̄={c_bar}, ε={epsilon}, ω̲={omega_min})"
        )));
    }
    let eta = theoretical_eta(n, epsilon);
    let denom = 4.0 * c_bar / eta + rbcd_rho(c_bar, eta);
    let tau = if denom > 0.0 { 1.0 / denom } else { DEFAULT_TAU };
    Ok(RbcdParams { use_theoretical_schedule: true, ..RbcdParams::new(1, tau, eta, epsilon) })
}

/// Result of a projected barycenter solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u_hat: StiefelPoint,
    /// Rounded plans with shared marginal `q`.
    pub plans: PlanSet,
    pub q: DVector<f64>,
    /// `f(π̂, Û)`.
    pub objective: f64,
    pub iterations: usize,
    /// `‖Proj_{T_U}(2 V U)‖_F` per iteration.
    pub grad_norm_trace: Vec<f64>,
    /// Dual value `g` per iteration (at the inner optimum for RGA-IBP).
    pub dual_trace: Vec<f64>,
    pub converged: bool,
    pub duals: DualPotentials,
    pub eta: f64,
    pub tau: f64,
}

/// `grad_U g(u, v, U) = Proj_{T_U}(−(2/η) V_{π(u,v,U)} U)`.
pub fn dual_grad_u<'a>(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    duals: &DualPotentials,
    u: &'a StiefelPoint,
    eta: f64,
) -> Result<TangentVector<'a>> {
    let engine = Engine::new(set, y, Some(u), eta, true)?;
    let plans = engine.plans(duals);
    let vu = correlation_times(set, y, &plans, u.matrix());
    tangent_project(u, &(vu * (-2.0 / eta)))
}

pub fn rbcd_solve(set: &MeasureSet, y: &DiscreteMeasure, params: &RbcdParams) -> Result<SolveReport> {
    params.validate()?;
    if y.dim() != set.dim() {
        return Err(shape_err(format!("barycenter dimension {} vs {}", y.dim(), set.dim())));
    }
    let c_bar = max_cost(set, y)?;
    let (eta, tau) = if params.use_theoretical_schedule {
        let th = theoretical_params(set.support_size(), c_bar, params.epsilon, set.omega_min())?;
        (th.eta, th.tau)
    } else {
        (params.eta, params.tau)
    };
    let eps = params.epsilon;
    let spread_tol = if c_bar > 0.0 { set.omega_min().powf(1.5) * eps / (12.0 * c_bar) } else { f64::INFINITY };

    let mut u = match &params.initial_u {
        Some(u0) => {
            if u0.ambient_dim() != set.dim() {
                return Err(shape_err(format!("initial U has {} rows, expected {}", u0.ambient_dim(), set.dim())));
            }
            u0.clone()
        }
        None => random_stiefel(set.dim(), params.k, params.seed)?,
    };
    if u.rank() != params.k {
        return Err(shape_err(format!("initial U has {} columns, k = {}", u.rank(), params.k)));
    }
    let mut engine = Engine::new(set, y, Some(&u), eta, params.log_domain_shift)?;
    let mut duals = DualPotentials::zeros_rect(set.len(), set.support_size(), y.len());
    let mut grad_norm_trace = Vec::new();
    let mut dual_trace = Vec::new();

    for t in 0..params.max_iter {
        let g = engine.u_update(&mut duals)?;
        if !g.is_finite() {
            return Err(PrwbError::Numerical(format!("dual value became {g} at iteration {t}")));
        }
        let before_v = duals.clone();
        let step = engine.v_update(&mut duals)?;
        let marginals: Vec<DVector<f64>> = step.log_marginals.iter().map(|lq| lq.map(f64::exp)).collect();
        let (spread, q_bar) = marginal_spread(&marginals, set.omega());

        let plans = engine.plans(&duals);
        let ascent = tangent_project(&u, &(correlation_times(set, y, &plans, u.matrix()) * 2.0))?;
        let ascent_norm = ascent.norm();
        if !ascent_norm.is_finite() {
            return Err(PrwbError::Numerical(format!("gradient norm became {ascent_norm} at iteration {t}")));
        }
        grad_norm_trace.push(ascent_norm);
        dual_trace.push(g);

        // η ‖grad_U g‖ = ‖Proj(2 V U)‖
        let converged = spread <= spread_tol && ascent_norm <= eps / 3.0;
        if converged || t + 1 == params.max_iter {
            if !converged {
                log::debug!("RBCD hit max_iter={}; spread {spread:e}, grad {ascent_norm:e}", params.max_iter);
            }
            let q = normalized(q_bar);
            let raw = engine.plans(&before_v);
            let rounded = raw
                .iter()
                .zip(set.measures())
                .map(|(pi, mu)| round_plan(pi, mu.weights(), &q))
                .collect::<Result<Vec<_>>>()?;
            let plans = PlanSet::with_marginal(rounded, q.clone())?;
            let objective = primal_objective(set, y, &plans, &u)?;
            return Ok(SolveReport {
                u_hat: u,
                plans,
                q,
                objective,
                iterations: t + 1,
                grad_norm_trace,
                dual_trace,
                converged,
                duals,
                eta,
                tau,
            });
        }
        // U − τ grad_U g = U + (τ/η) Proj(2 V U)
        let step_dir = ascent.scaled(tau / eta);
        u = retract(&u, &step_dir)?;
        engine.set_projection(y, Some(&u))?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Outcome of an ε-stationarity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stationary,
    NotStationary,
    /// The inner oracle did not converge.
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationarity {
    pub grad_norm: f64,
    pub gap: f64,
    pub verdict: Verdict,
}

impl Stationarity {
    pub fn is_stationary(&self) -> bool {
        self.verdict == Verdict::Stationary
    }
}

/// Oracle settings for [`check_stationarity`]:
/// `η_oracle = min(η/100, 1e-3 c̄)` and the tolerance `epsilon`.
pub fn oracle_params(eta: f64, c_bar: f64, epsilon: f64) -> Result<EntropicParams> {
    let eta_oracle = if c_bar > 0.0 { (eta / 100.0).min(1e-3 * c_bar) } else { eta / 100.0 };
    EntropicParams::new(eta_oracle, epsilon)
}

/// Tests `‖grad_U f(π̂, Û)‖ ≤ ε` and `f(π̂, Û) − f(π*(Û), Û) ≤ ε`, with
/// `π*(Û)` approximated by a sharply regularized IBP solve.
pub fn check_stationarity(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    u_hat: &StiefelPoint,
    plans_hat: &PlanSet,
    epsilon: f64,
    oracle: &EntropicParams,
) -> Result<Stationarity> {
    if !plans_hat.is_feasible(set) {
        return Err(PrwbError::InvalidArgument(format!(
            "plans are not feasible (error {:e})",
            plans_hat.feasibility_error(set)
        )));
    }
    let grad_norm = riemannian_grad_f(set, y, plans_hat, u_hat)?.norm();
    let reference = ibp_solve(set, y, u_hat, oracle)?;
    let gap = primal_objective(set, y, plans_hat, u_hat)? - primal_objective(set, y, &reference.plans, u_hat)?;
    let verdict = if !reference.converged {
        Verdict::Indeterminate
    } else if grad_norm <= epsilon && gap <= epsilon {
        Verdict::Stationary
    } else {
        Verdict::NotStationary
    };
    Ok(Stationarity { grad_norm, gap, verdict })
}
