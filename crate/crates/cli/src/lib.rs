//! Experiment drivers and command-line plumbing for the `prwb` binary.

pub mod config;
pub mod experiments;
pub mod fixtures;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use prwb_core::PrwbError;

use crate::config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Solver(#[from] PrwbError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(PrwbError::NotConverged { .. }) => EXIT_NOT_CONVERGED,
            _ => EXIT_INPUT,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prwb", version, about = "Projection robust Wasserstein barycenters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// JSON config; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `solver.tau=0.05` (repeatable, applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output path (CSV, JSON report, or measures file depending on command).
    #[arg(long)]
    pub out: PathBuf,
    /// Log solver progress to stderr.
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one barycenter problem and write a JSON report.
    Solve(CommonArgs),
    /// Objective versus projection dimension k.
    Plateau(CommonArgs),
    /// Relative objective error under additive noise.
    Noise(CommonArgs),
    /// Mean estimation error against the Gaussian ground truth.
    Mee(CommonArgs),
    /// Wall-clock comparison of IBP, RBCD and RGA-IBP.
    Timing(CommonArgs),
    /// D2 / PD2 clustering of discrete measures.
    Cluster(CommonArgs),
    /// Write a synthetic measures file.
    GenFixture(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Solve(a)
            | Command::Plateau(a)
            | Command::Noise(a)
            | Command::Mee(a)
            | Command::Timing(a)
            | Command::Cluster(a)
            | Command::GenFixture(a) => a,
        }
    }
}

/// `<out>` with its extension replaced by `suffix`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("PRWB_THREADS") {
        let n: usize = raw.parse().map_err(|_| CliError::Config(format!("PRWB_THREADS must be an integer, got `{raw}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| CliError::Config(e.to_string()))
}

fn finish(outcome: experiments::Outcome, out: &Path) -> Result<i32, CliError> {
    report::save_csv(&outcome.rows, out)?;
    if outcome.not_converged > 0 {
        log::warn!("{} solver runs hit their iteration cap", outcome.not_converged);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    let args = cli.command.args();
    let cfg = Config::load(args.config.as_deref(), &args.overrides)?;
    let out = args.out.as_path();
    let pool = thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Solve(_) => {
            let summary = experiments::solve(&cfg)?;
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            std::fs::write(out, text).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
            Ok(if summary.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Plateau(_) => finish(experiments::plateau(&cfg)?, out),
        Command::Noise(_) => finish(experiments::noise(&cfg)?, out),
        Command::Mee(_) => finish(experiments::mee_experiment(&cfg)?, out),
        Command::Timing(_) => finish(experiments::timing(&cfg)?, out),
        Command::Cluster(_) => {
            let labels_out = cfg.io.labels_out.clone().unwrap_or_else(|| sibling(out, "labels.csv"));
            finish(experiments::cluster(&cfg, &labels_out)?, out)
        }
        Command::GenFixture(_) => {
            experiments::gen_fixture(&cfg, out)?;
            Ok(EXIT_OK)
        }
    })
}

/// Parses `argv`, runs, and maps errors to exit codes with a message on stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.command.args().verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("prwb: {e}");
            e.exit_code()
        }
    }
}
