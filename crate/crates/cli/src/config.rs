//! Experiment configuration: a JSON file merged over defaults, then
//! `key=value` overrides on dotted paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Solve,
    Plateau,
    Noise,
    Mee,
    Timing,
    Cluster,
    GenFixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Ibp,
    Rbcd,
    Rga,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Empirical,
    Pdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    /// Rank-`k_star` Gaussians.
    Spiked,
    /// Separable groups of point clouds for clustering.
    Clusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Plain,
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub k_star: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d: 20, n: 10, m: 3, k: 3, k_star: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: SolverKind,
    /// `None` selects `0.5 · median cost` per instance.
    pub eta: Option<f64>,
    pub epsilon: f64,
    /// Ascent step on `Proj(2 V U)`; RBCD receives `tau · η`.
    pub tau: f64,
    /// Use the complexity-analysis schedules for η and τ instead.
    pub theoretical: bool,
    pub max_iter: usize,
    pub max_outer_iter: usize,
    pub inner_max_iter: usize,
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Rbcd,
            eta: None,
            epsilon: 0.01,
            tau: 0.01,
            theoretical: false,
            max_iter: 200_000,
            max_outer_iter: 100_000,
            inner_max_iter: 100_000,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub k_list: Vec<usize>,
    pub sigma_list: Vec<f64>,
    pub n_list: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            k_list: vec![1, 2, 3, 4, 5, 7, 10, 15, 20],
            sigma_list: vec![1.0, 2.0, 4.0],
            n_list: vec![20, 50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub kind: FixtureKind,
    /// `None` picks the experiment's own protocol (PDF weights for MEE,
    /// empirical elsewhere).
    pub sampling: Option<Sampling>,
    /// Spike strengths for the spiked fixture; all ones when empty.
    pub spikes: Vec<f64>,
    /// Diagonal entries of the MEE fixture.
    pub spike_value: f64,
    pub floor_value: f64,
    /// Half-width of the uniform cube for the MEE barycenter support.
    pub support_box: f64,
    /// Number of groups and distance between group centers (clusters kind).
    pub groups: usize,
    pub separation: f64,
    pub per_group: usize,
    pub jitter: f64,
    /// Also write a k-means barycenter support to `io.support`.
    pub kmeans_y: bool,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            kind: FixtureKind::Spiked,
            sampling: None,
            spikes: Vec::new(),
            spike_value: 10.1,
            floor_value: 0.1,
            support_box: 2.0,
            groups: 3,
            separation: 10.0,
            per_group: 20,
            jitter: 0.5,
            kmeans_y: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub variant: Variant,
    pub n_support: usize,
    pub max_rounds: usize,
    pub refit_rounds: usize,
    pub eta_label: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { clusters: 3, variant: Variant::Plain, n_support: 10, max_rounds: 50, refit_rounds: 5, eta_label: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Measures file (solve, cluster).
    pub input: Option<PathBuf>,
    /// Barycenter support file: a measure-set document whose first measure is `Y`.
    pub support: Option<PathBuf>,
    /// Ground-truth labels, one integer per line.
    pub labels: Option<PathBuf>,
    /// Predicted labels; defaults to `<out>.labels.csv`.
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dims: Dims,
    pub solver: SolverConfig,
    pub grid: Grid,
    pub fixture: FixtureConfig,
    pub cluster: ClusterConfig,
    pub io: IoConfig,
    pub seed: u64,
    pub repeats: usize,
    /// Fill the `seconds` CSV column with wall-clock time (breaks byte-identical reruns).
    pub record_seconds: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            solver: SolverConfig::default(),
            grid: Grid::default(),
            fixture: FixtureConfig::default(),
            cluster: ClusterConfig::default(),
            io: IoConfig::default(),
            seed: 0,
            repeats: 20,
            record_seconds: false,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, value) in p {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Config(format!("`{path}` does not name a setting")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::Config(format!("unknown setting `{path}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown setting `{path}`")))?;
    }
    Err(CliError::Config("empty setting name".into()))
}

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
fn parse_override(item: &str) -> Result<(String, Value), CliError> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Config::default()).expect("defaults serialize");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        for item in overrides {
            let (key, v) = parse_override(item)?;
            set_path(&mut value, &key, v)?;
        }
        let config: Config = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let Dims { d, n, m, k, k_star } = self.dims;
        if d == 0 || n == 0 || m == 0 || k == 0 || k_star == 0 {
            return Err(CliError::Config("dims must be positive".into()));
        }
        if k > d || k_star > d {
            return Err(CliError::Config(format!("k={k} and k_star={k_star} must not exceed d={d}")));
        }
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        if self.grid.k_list.contains(&0) {
            return Err(CliError::Config("k_list entries must be positive".into()));
        }
        if self.grid.sigma_list.iter().any(|s| !(*s >= 0.0)) {
            return Err(CliError::Config("sigma_list entries must be nonnegative".into()));
        }
        if self.grid.n_list.contains(&0) {
            return Err(CliError::Config("n_list entries must be positive".into()));
        }
        let s = &self.solver;
        if !(s.epsilon > 0.0) || !(s.tau >= 0.0) || s.eta.is_some_and(|e| !(e > 0.0)) {
            return Err(CliError::Config("epsilon and eta must be positive, tau nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dims": {"d": 5}, "repeats": 3}"#).unwrap();
        let cfg = Config::load(Some(&path), &["repeats=7".into(), "solver.solver=rga".into()]).unwrap();
        assert_eq!(cfg.dims.d, 5);
        assert_eq!(cfg.dims.n, 10);
        assert_eq!(cfg.repeats, 7);
        assert_eq!(cfg.solver.solver, SolverKind::Rga);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::load(None, &["solver.tua=1".into()]).is_err());
        assert!(Config::load(None, &["repeats".into()]).is_err());
        assert!(Config::load(None, &["repeats=0".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dims": {"dd": 5}}"#).unwrap();
        assert!(Config::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn list_and_null_overrides_parse_as_json() {
        let cfg = Config::load(None, &["grid.k_list=[1,2]".into(), "solver.eta=0.5".into()]).unwrap();
        assert_eq!(cfg.grid.k_list, vec![1, 2]);
        assert_eq!(cfg.solver.eta, Some(0.5));
        let cfg = Config::load(None, &["solver.eta=null".into()]).unwrap();
        assert_eq!(cfg.solver.eta, None);
    }
}
