//! Riemannian gradient ascent on `f_η(U)` with IBP inner minimization.

use crate::entropic::{run_ibp, DualPotentials, EntropicParams, Engine, IbpOutput};
use crate::error::{shape_err, PrwbError, Result};
use crate::manifold::{correlation_times, random_stiefel, retract, tangent_project, StiefelPoint};
use crate::measures::{max_cost, DiscreteMeasure, MeasureSet};
use crate::entropic::primal_objective;
use crate::rbcd::{theoretical_eta, SolveReport, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq)]
pub struct RgaParams {
    pub k: usize,
    pub tau: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub max_outer_iter: usize,
    /// Inner IBP settings; `eta`/`epsilon` mirror the outer values.
    pub inner: EntropicParams,
    pub seed: u64,
    /// Start each inner solve from the previous potentials.
    pub warm_start: bool,
    pub initial_u: Option<StiefelPoint>,
    /// Keep every outer iterate `U_t` in [`RgaReport::iterates`].
    pub record_iterates: bool,
}

impl RgaParams {
    pub fn new(k: usize, tau: f64, eta: f64, epsilon: f64) -> Result<Self> {
        Ok(Self {
            k,
            tau,
            eta,
            epsilon,
            max_outer_iter: 2_000,
            inner: EntropicParams::new(eta, epsilon)?,
            seed: 0,
            warm_start: true,
            initial_u: None,
            record_iterates: false,
        })
    }

    pub fn with_defaults(set: &MeasureSet, y: &DiscreteMeasure, k: usize, epsilon: f64) -> Result<Self> {
        Self::new(k, DEFAULT_TAU, crate::rbcd::default_eta(set, y)?, epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(PrwbError::InvalidArgument(format!("tau must be nonnegative, got {}", self.tau)));
        }
        if self.max_outer_iter == 0 || self.k == 0 {
            return Err(PrwbError::InvalidArgument("max_outer_iter and k must be positive".into()));
        }
        if self.inner.eta != self.eta || self.inner.epsilon != self.epsilon {
            return Err(PrwbError::InvalidArgument("inner eta/epsilon must equal the outer values".into()));
        }
        Ok(())
    }
}

/// `ρ = 2c̄ + 4c̄²/η`.
pub fn rga_rho(c_bar: f64, eta: f64) -> f64 {
    2.0 * c_bar + 4.0 * c_bar * c_bar / eta
}

/// `η = ε/(4 log n + 2)` and `τ = 1/(8c̄ + 2ρ)` (retraction constants set to 1).
pub fn rga_theoretical_params(n: usize, c_bar: f64, epsilon: f64) -> Result<RgaParams> {
    if n == 0 || !(c_bar >= 0.0) || !(epsilon > 0.0) {
        return Err(PrwbError::InvalidArgument(format!(
            "theoretical schedule needs positive inputs (n={n}, c̄={c_bar}, ε={epsilon})"
        )));
    }
    let eta = theoretical_eta(n, epsilon);
    let denom = 8.0 * c_bar + 2.0 * rga_rho(c_bar, eta);
    let tau = if denom > 0.0 { 1.0 / denom } else { DEFAULT_TAU };
    RgaParams::new(1, tau, eta, epsilon)
}

/// [`SolveReport`] plus outer-loop diagnostics.
#[derive(Debug, Clone)]
pub struct RgaReport {
    pub report: SolveReport,
    /// Every inner solve met its stopping rule.
    pub inner_converged: bool,
    pub inner_iterations: Vec<usize>,
    pub inner_residuals: Vec<f64>,
    pub inner_threshold: f64,
    /// `U_0, …, U_T` when requested.
    pub iterates: Vec<StiefelPoint>,
}

pub fn rga_ibp_solve(set: &MeasureSet, y: &DiscreteMeasure, params: &RgaParams) -> Result<RgaReport> {
    params.validate()?;
    if y.dim() != set.dim() {
        return Err(shape_err(format!("barycenter dimension {} vs {}", y.dim(), set.dim())));
    }
    let mut u = match &params.initial_u {
        Some(u0) => u0.clone(),
        None => random_stiefel(set.dim(), params.k, params.seed)?,
    };
    if u.ambient_dim() != set.dim() || u.rank() != params.k {
        return Err(shape_err(format!("initial U is {}x{}", u.ambient_dim(), u.rank())));
    }
    let threshold = params.inner.ibp_threshold(max_cost(set, y)?);
    let mut engine = Engine::new(set, y, Some(&u), params.eta, params.inner.log_domain_shift)?;
    let zeros = DualPotentials::zeros_rect(set.len(), set.support_size(), y.len());
    let mut start = zeros.clone();

    let mut grad_norm_trace = Vec::new();
    let mut dual_trace = Vec::new();
    let mut inner_iterations = Vec::new();
    let mut inner_residuals = Vec::new();
    let mut iterates = Vec::new();
    let mut inner_converged = true;

    for t in 0..params.max_outer_iter {
        if params.record_iterates {
            iterates.push(u.clone());
        }
        let inner: IbpOutput = run_ibp(&engine, set, start, params.inner.max_iter, threshold)?;
        inner_converged &= inner.converged;
        inner_iterations.push(inner.iterations);
        inner_residuals.push(inner.residual);
        start = if params.warm_start { inner.duals.clone() } else { zeros.clone() };

        let xi = tangent_project(&u, &(correlation_times(set, y, inner.plans.plans(), u.matrix()) * 2.0))?;
        let xi_norm = xi.norm();
        if !xi_norm.is_finite() {
            return Err(PrwbError::Numerical(format!("ascent direction norm became {xi_norm} at iteration {t}")));
        }
        grad_norm_trace.push(xi_norm);
        dual_trace.push(inner.dual_value);

        let converged = xi_norm <= params.epsilon;
        if converged || t + 1 == params.max_outer_iter {
            let objective = primal_objective(set, y, &inner.plans, &u)?;
            let report = SolveReport {
                u_hat: u,
                plans: inner.plans,
                q: inner.q,
                objective,
                iterations: t + 1,
                grad_norm_trace,
                dual_trace,
                converged,
                duals: inner.duals,
                eta: params.eta,
                tau: params.tau,
            };
            return Ok(RgaReport {
                report,
                inner_converged,
                inner_iterations,
                inner_residuals,
                inner_threshold: threshold,
                iterates,
            });
        }
        let step = xi.scaled(params.tau);
        u = retract(&u, &step)?;
        engine.set_projection(y, Some(&u))?;
    }
    unreachable!("loop returns on its last iteration")
}

/// `f_η(U) = min_{π ∈ Π(p)} f_η(π, U)`, evaluated as `−η (g + 1)` at the
/// potentials of an IBP solve with the given parameters.
pub fn regularized_value(
    set: &MeasureSet,
    y: &DiscreteMeasure,
    u: &StiefelPoint,
    params: &EntropicParams,
) -> Result<f64> {
    let out = crate::entropic::ibp_solve(set, y, u, params)?;
    Ok(-params.eta * (out.dual_value + 1.0))
}
