//! Experiment drivers. Each returns result rows plus the number of solver
//! runs that stopped at their iteration cap.

use std::path::Path;
use std::time::Instant;

use prwb_core::clustering::{ami, d2_cluster, ClusterParams, ClusterVariant, Partition};
use prwb_core::entropic::{ibp_solve_wb, wb_objective, EntropicParams};
use prwb_core::gaussian::{add_noise, gaussian_barycenter_cov, gaussian_wb_value, mee, relative_error, FixedPointConfig};
use prwb_core::measures::{
    kmeans_support, load_measure_set, max_cost, save_measure_set, DiscreteMeasure, MeasureSet,
};
use prwb_core::rbcd::{default_eta, rbcd_solve, theoretical_params, RbcdParams, SolveReport};
use prwb_core::rga::{rga_ibp_solve, rga_theoretical_params, RgaParams};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, FixtureKind, Sampling, SolverKind, Variant};
use crate::fixtures::{cluster_measures, diagonal_spike_covs, sample_set, spiked_set, sub_seed, uniform_box};
use crate::report::ResultRow;
use crate::CliError;

#[derive(Debug, Default)]
pub struct Outcome {
    pub rows: Vec<ResultRow>,
    /// Solver runs that hit their iteration cap.
    pub not_converged: usize,
}

/// One solver evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Run {
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seconds: f64,
}

fn eta_for(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure) -> prwb_core::Result<f64> {
    match cfg.solver.eta {
        Some(eta) => Ok(eta),
        None => default_eta(set, y),
    }
}

pub fn rbcd_params(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure, k: usize, seed: u64) -> prwb_core::Result<RbcdParams> {
    let s = &cfg.solver;
    let mut p = if s.theoretical {
        let th = theoretical_params(set.support_size(), max_cost(set, y)?, s.epsilon, set.omega_min())?;
        RbcdParams { k, ..th }
    } else {
        let eta = eta_for(cfg, set, y)?;
        RbcdParams::new(k, s.tau * eta, eta, s.epsilon)
    };
    p.max_iter = s.max_iter;
    p.seed = seed;
    Ok(p)
}

pub fn rga_params(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure, k: usize, seed: u64) -> prwb_core::Result<RgaParams> {
    let s = &cfg.solver;
    let mut p = if s.theoretical {
        RgaParams { k, ..rga_theoretical_params(set.support_size(), max_cost(set, y)?, s.epsilon)? }
    } else {
        RgaParams::new(k, s.tau, eta_for(cfg, set, y)?, s.epsilon)?
    };
    p.max_outer_iter = s.max_outer_iter;
    p.inner.max_iter = s.inner_max_iter;
    p.warm_start = s.warm_start;
    p.seed = seed;
    Ok(p)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

pub fn run_ibp(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure) -> prwb_core::Result<Run> {
    let params = EntropicParams::new(eta_for(cfg, set, y)?, cfg.solver.epsilon)?.with_max_iter(cfg.solver.inner_max_iter);
    let (out, seconds) = timed(|| ibp_solve_wb(set, y, &params));
    let out = out?;
    Ok(Run { objective: wb_objective(set, y, &out.plans)?, converged: out.converged, iterations: out.iterations, seconds })
}

pub fn run_rbcd(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure, k: usize, seed: u64) -> prwb_core::Result<(Run, SolveReport)> {
    let params = rbcd_params(cfg, set, y, k, seed)?;
    let (r, seconds) = timed(|| rbcd_solve(set, y, &params));
    let r = r?;
    Ok((Run { objective: r.objective, converged: r.converged, iterations: r.iterations, seconds }, r))
}

pub fn run_rga(cfg: &Config, set: &MeasureSet, y: &DiscreteMeasure, k: usize, seed: u64) -> prwb_core::Result<(Run, SolveReport)> {
    let params = rga_params(cfg, set, y, k, seed)?;
    let (r, seconds) = timed(|| rga_ibp_solve(set, y, &params));
    let r = r?;
    let converged = r.report.converged && r.inner_converged;
    Ok((Run { objective: r.report.objective, converged, iterations: r.report.iterations, seconds }, r.report))
}

fn spiked_fixture(cfg: &Config, n: usize, seed: u64) -> prwb_core::Result<(MeasureSet, DiscreteMeasure)> {
    let dims = &cfg.dims;
    let sampling = cfg.fixture.sampling.unwrap_or(Sampling::Empirical);
    let (set, _) = spiked_set(dims.d, n, dims.m, dims.k_star, &cfg.fixture.spikes, sampling, seed)?;
    let y = kmeans_support(&set, n, seed)?;
    Ok((set, y))
}

fn repeat<T: Send>(cfg: &Config, f: impl Fn(u64) -> Result<T, CliError> + Sync) -> Result<Vec<T>, CliError> {
    (0..cfg.repeats as u64).into_par_iter().map(|r| f(cfg.seed + r)).collect()
}

fn seconds_column(cfg: &Config, total: f64) -> f64 {
    if cfg.record_seconds {
        total
    } else {
        0.0
    }
}

fn row(cfg: &Config, experiment: &str, param: String, value_name: &str, runs: &[Run], value: impl Fn(&Run) -> f64) -> ResultRow {
    let samples: Vec<f64> = runs.iter().map(value).collect();
    let total: f64 = runs.iter().map(|r| r.seconds).sum();
    ResultRow::from_samples(experiment, param, value_name, &samples, seconds_column(cfg, total))
}

fn count_failures<'a>(runs: impl IntoIterator<Item = &'a Run>) -> usize {
    runs.into_iter().filter(|r| !r.converged).count()
}

/// Objective versus projection dimension for RBCD and RGA-IBP.
pub fn plateau(cfg: &Config) -> Result<Outcome, CliError> {
    if let Some(k) = cfg.grid.k_list.iter().find(|k| **k > cfg.dims.d) {
        return Err(CliError::Config(format!("k={k} exceeds d={}", cfg.dims.d)));
    }
    let per_repeat: Vec<Vec<(Run, Run)>> = repeat(cfg, |seed| {
        let (set, y) = spiked_fixture(cfg, cfg.dims.n, seed)?;
        cfg.grid
            .k_list
            .iter()
            .map(|&k| Ok((run_rbcd(cfg, &set, &y, k, seed)?.0, run_rga(cfg, &set, &y, k, seed)?.0)))
            .collect()
    })?;
    let mut out = Outcome::default();
    for (i, &k) in cfg.grid.k_list.iter().enumerate() {
        let rbcd: Vec<Run> = per_repeat.iter().map(|r| r[i].0).collect();
        let rga: Vec<Run> = per_repeat.iter().map(|r| r[i].1).collect();
        out.not_converged += count_failures(rbcd.iter().chain(&rga));
        out.rows.push(row(cfg, "plateau", format!("k={k};solver=RBCD"), "objective", &rbcd, |r| r.objective));
        out.rows.push(row(cfg, "plateau", format!("k={k};solver=RGA-IBP"), "objective", &rga, |r| r.objective));
    }
    Ok(out)
}

/// Relative change of the WB and RPRWB objectives under additive noise.
pub fn noise(cfg: &Config) -> Result<Outcome, CliError> {
    let k = cfg.dims.k;
    let n = cfg.dims.n;
    let per_repeat: Vec<Vec<(f64, f64, usize)>> = repeat(cfg, |seed| {
        let (clean, y) = spiked_fixture(cfg, n, seed)?;
        let wb_clean = run_ibp(cfg, &clean, &y)?;
        let rp_clean = run_rbcd(cfg, &clean, &y, k, seed)?.0;
        let clean_fails = count_failures([&wb_clean, &rp_clean]);
        let mut values = Vec::new();
        for (si, &sigma) in cfg.grid.sigma_list.iter().enumerate() {
            let mut l = 0u64;
            let noisy = clean.map_measures(|mu| {
                l += 1;
                add_noise(mu, sigma, sub_seed(seed, 1_000 + 100 * si as u64 + l))
            })?;
            let y_noisy = if sigma == 0.0 { y.clone() } else { kmeans_support(&noisy, n, seed)? };
            let wb = run_ibp(cfg, &noisy, &y_noisy)?;
            let rp = run_rbcd(cfg, &noisy, &y_noisy, k, seed)?.0;
            let fails = count_failures([&wb, &rp]) + if si == 0 { clean_fails } else { 0 };
            let e_wb = relative_error(wb.objective, wb_clean.objective)?.abs();
            let e_rp = relative_error(rp.objective, rp_clean.objective)?.abs();
            values.push((e_wb, e_rp, fails));
        }
        Ok(values)
    })?;
    let mut out = Outcome::default();
    for (si, sigma) in cfg.grid.sigma_list.iter().enumerate() {
        let wb: Vec<f64> = per_repeat.iter().map(|r| r[si].0).collect();
        let rp: Vec<f64> = per_repeat.iter().map(|r| r[si].1).collect();
        out.not_converged += per_repeat.iter().map(|r| r[si].2).sum::<usize>();
        out.rows.push(ResultRow::from_samples("noise", format!("sigma={sigma};model=WB"), "relative_error", &wb, 0.0));
        out.rows.push(ResultRow::from_samples("noise", format!("sigma={sigma};model=RPRWB"), "relative_error", &rp, 0.0));
    }
    Ok(out)
}

/// Ground-truth Gaussian barycenter value for the diagonal MEE fixture.
pub fn mee_ground_truth(cfg: &Config) -> Result<f64, CliError> {
    let f = &cfg.fixture;
    let covs = diagonal_spike_covs(cfg.dims.d, cfg.dims.m, f.spike_value, f.floor_value);
    let omega = nalgebra::DVector::from_element(cfg.dims.m, 1.0 / cfg.dims.m as f64);
    let s = gaussian_barycenter_cov(&covs, &omega, &FixedPointConfig::default())?;
    Ok(gaussian_wb_value(&s.covariance, &covs, &omega)?)
}

/// Sampled WB and RPRWB objectives against the Gaussian ground truth.
pub fn mee_experiment(cfg: &Config) -> Result<Outcome, CliError> {
    let f = &cfg.fixture;
    let d = cfg.dims.d;
    let covs = diagonal_spike_covs(d, cfg.dims.m, f.spike_value, f.floor_value);
    let truth = mee_ground_truth(cfg)?;
    let sampling = f.sampling.unwrap_or(Sampling::Pdf);
    let mut out = Outcome::default();
    for &n in &cfg.grid.n_list {
        let runs: Vec<(Run, Run)> = repeat(cfg, |seed| {
            let set = sample_set(&covs, n, sampling, sub_seed(seed, n as u64))?;
            let y = uniform_box(d, n, f.support_box, sub_seed(seed, 7 * n as u64 + 1))?;
            Ok((run_ibp(cfg, &set, &y)?, run_rbcd(cfg, &set, &y, cfg.dims.k, seed)?.0))
        })?;
        let wb: Vec<Run> = runs.iter().map(|r| r.0).collect();
        let rp: Vec<Run> = runs.iter().map(|r| r.1).collect();
        out.not_converged += count_failures(wb.iter().chain(&rp));
        out.rows.push(row(cfg, "mee", format!("n={n};model=WB"), "mee", &wb, |r| mee(truth, r.objective)));
        out.rows.push(row(cfg, "mee", format!("n={n};model=RPRWB"), "mee", &rp, |r| mee(truth, r.objective)));
    }
    Ok(out)
}

/// Wall-clock time of IBP, RBCD and RGA-IBP. Runs sequentially so timings
/// do not compete for cores.
pub fn timing(cfg: &Config) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    for &n in &cfg.grid.n_list {
        let mut runs: [Vec<Run>; 3] = Default::default();
        for r in 0..cfg.repeats as u64 {
            let seed = cfg.seed + r;
            let (set, y) = spiked_fixture(cfg, n, seed)?;
            runs[0].push(run_ibp(cfg, &set, &y)?);
            runs[1].push(run_rbcd(cfg, &set, &y, cfg.dims.k, seed)?.0);
            runs[2].push(run_rga(cfg, &set, &y, cfg.dims.k, seed)?.0);
        }
        for (name, rs) in ["IBP", "RBCD", "RGA-IBP"].iter().zip(&runs) {
            out.not_converged += count_failures(rs);
            let param = format!("n={n};solver={name}");
            out.rows.push(row(cfg, "timing", param, "seconds", rs, |r| r.seconds));
        }
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse().map_err(|e| CliError::Input(format!("{}: bad label `{l}`: {e}", path.display()))))
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<(), CliError> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// D2 or PD2 clustering. Without an input file the separable cluster fixture
/// (and its labels) is generated from the config.
pub fn cluster(cfg: &Config, labels_out: &Path) -> Result<Outcome, CliError> {
    let (measures, truth) = match &cfg.io.input {
        Some(path) => {
            let set = load_measure_set(path)?;
            let truth = cfg.io.labels.as_deref().map(read_labels).transpose()?;
            (set.measures().to_vec(), truth)
        }
        None => {
            let f = &cfg.fixture;
            let (ms, labels) =
                cluster_measures(cfg.dims.d, cfg.dims.n, f.groups, f.per_group, f.separation, f.jitter, cfg.seed)?;
            (ms, Some(labels))
        }
    };
    if let Some(t) = &truth {
        if t.len() != measures.len() {
            return Err(CliError::Input(format!("{} labels for {} measures", t.len(), measures.len())));
        }
    }
    let c = &cfg.cluster;
    let variant = match c.variant {
        Variant::Plain => ClusterVariant::Plain,
        Variant::Projected => ClusterVariant::Projected { k: cfg.dims.k },
    };
    let params = ClusterParams {
        n_support: c.n_support,
        max_rounds: c.max_rounds,
        refit_rounds: c.refit_rounds,
        epsilon: cfg.solver.epsilon,
        eta_label: c.eta_label,
        tau: cfg.solver.tau,
        max_iter: cfg.solver.max_iter,
    };
    let (state, seconds) = timed(|| d2_cluster(&measures, c.clusters, variant, &params, cfg.seed));
    let state = state?;
    write_labels(labels_out, &state.labels)?;

    let name = match c.variant {
        Variant::Plain => "D2",
        Variant::Projected => "PD2",
    };
    let mut out = Outcome::default();
    for (round, (obj, labels)) in state.objective_trace.iter().zip(&state.label_trace).enumerate() {
        let param = format!("round={};variant={name}", round + 1);
        out.rows.push(ResultRow::from_samples("cluster", param.clone(), "objective", &[*obj], 0.0));
        if let Some(t) = &truth {
            let score = ami(&Partition::new(labels)?, &Partition::new(t)?)?;
            out.rows.push(ResultRow::from_samples("cluster", param, "ami", &[score], 0.0));
        }
    }
    if let Some(t) = &truth {
        let score = ami(&Partition::new(&state.labels)?, &Partition::new(t)?)?;
        out.rows.push(ResultRow::from_samples("cluster", format!("final;variant={name}"), "ami", &[score], seconds_column(cfg, seconds)));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub solver: SolverKind,
    pub objective: f64,
    pub q: Vec<f64>,
    pub grad_norm: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub eta: f64,
    pub tau: Option<f64>,
    /// Projector columns, one inner array per column.
    pub u: Option<Vec<Vec<f64>>>,
}

fn summary_from(solver: SolverKind, r: &SolveReport) -> SolveSummary {
    SolveSummary {
        solver,
        objective: r.objective,
        q: r.q.iter().copied().collect(),
        grad_norm: r.grad_norm_trace.last().copied(),
        iterations: r.iterations,
        converged: r.converged,
        eta: r.eta,
        tau: Some(r.tau),
        u: Some(r.u_hat.matrix().column_iter().map(|c| c.iter().copied().collect()).collect()),
    }
}

/// Solves one barycenter problem from `io.input`.
pub fn solve(cfg: &Config) -> Result<SolveSummary, CliError> {
    let path = cfg.io.input.as_ref().ok_or_else(|| CliError::Config("solve needs io.input".into()))?;
    let set = load_measure_set(path)?;
    let y = match &cfg.io.support {
        Some(p) => load_measure_set(p)?.measures()[0].clone(),
        None => kmeans_support(&set, set.support_size(), cfg.seed)?,
    };
    let k = cfg.dims.k.min(set.dim());
    Ok(match cfg.solver.solver {
        SolverKind::Ibp => {
            let eta = eta_for(cfg, &set, &y)?;
            let params = EntropicParams::new(eta, cfg.solver.epsilon)?.with_max_iter(cfg.solver.inner_max_iter);
            let out = ibp_solve_wb(&set, &y, &params)?;
            SolveSummary {
                solver: SolverKind::Ibp,
                objective: wb_objective(&set, &y, &out.plans)?,
                q: out.q.iter().copied().collect(),
                grad_norm: None,
                iterations: out.iterations,
                converged: out.converged,
                eta,
                tau: None,
                u: None,
            }
        }
        SolverKind::Rbcd => summary_from(SolverKind::Rbcd, &run_rbcd(cfg, &set, &y, k, cfg.seed)?.1),
        SolverKind::Rga => {
            let params = rga_params(cfg, &set, &y, k, cfg.seed)?;
            let r = rga_ibp_solve(&set, &y, &params)?;
            let mut s = summary_from(SolverKind::Rga, &r.report);
            s.converged &= r.inner_converged;
            s
        }
    })
}

/// Writes a measure-set file (and optionally labels or a k-means support).
pub fn gen_fixture(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let f = &cfg.fixture;
    match f.kind {
        FixtureKind::Spiked => {
            let sampling = f.sampling.unwrap_or(Sampling::Empirical);
            let d = &cfg.dims;
            let (set, _) = spiked_set(d.d, d.n, d.m, d.k_star, &f.spikes, sampling, cfg.seed)?;
            save_measure_set(&set, out)?;
            if f.kmeans_y {
                let path =
                    cfg.io.support.as_ref().ok_or_else(|| CliError::Config("fixture.kmeans_y needs io.support".into()))?;
                let y = kmeans_support(&set, d.n, cfg.seed)?;
                save_measure_set(&MeasureSet::uniform(vec![y])?, path)?;
            }
        }
        FixtureKind::Clusters => {
            let (ms, labels) =
                cluster_measures(cfg.dims.d, cfg.dims.n, f.groups, f.per_group, f.separation, f.jitter, cfg.seed)?;
            save_measure_set(&MeasureSet::uniform(ms)?, out)?;
            let labels_path = cfg.io.labels.clone().unwrap_or_else(|| crate::sibling(out, "labels.csv"));
            write_labels(&labels_path, &labels)?;
        }
    }
    Ok(())
}
