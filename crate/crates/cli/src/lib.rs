//! `groundpose` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, parse or I/O error, 2 estimation failure.

pub mod commands;
pub mod scene;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use groundpose::ransac::RansacConfig;
use groundpose::refine::RobustConfig;
use groundpose::synthbench::{Experiment, Method};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Usage(String),
    /// At least one object could not be estimated; output was still written.
    #[error("estimation failed for {0} object(s)")]
    Estimation(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Estimation(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "groundpose",
    version,
    about = "Pose estimation for objects on a ground plane"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate object poses for a scene file.
    Estimate(EstimateArgs),
    /// Write synthetic scenes with ground-truth sidecars.
    Synth(SynthArgs),
    /// Run a synthetic experiment sweep.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RansacArgs {
    /// Inlier threshold in pixels.
    #[arg(long = "t-in", default_value_t = 4.0)]
    pub t_in: f64,
    /// Upper bound on RANSAC iterations.
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Confidence for the adaptive iteration bound.
    #[arg(long, default_value_t = 0.99)]
    pub confidence: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TauArgs {
    /// Inlier residual bound and lower clamp of the stage-2 scale, in pixels.
    #[arg(long, default_value_t = 4.0)]
    pub tau1: f64,
    /// Upper clamp of the stage-2 scale and lower clamp of stage 1, in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub tau2: f64,
    /// Upper clamp of the stage-1 scale, in pixels.
    #[arg(long, default_value_t = 12.0)]
    pub tau3: f64,
}

impl RansacArgs {
    pub fn config(&self, seed: u64) -> Result<RansacConfig, CliError> {
        let cfg = RansacConfig {
            inlier_threshold_px: self.t_in,
            max_iterations: self.max_iter,
            confidence: self.confidence,
            seed,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

impl TauArgs {
    pub fn config(&self) -> Result<RobustConfig, CliError> {
        let cfg = RobustConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            tau3: self.tau3,
            ..RobustConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Scene file (TOML).
    pub scene: PathBuf,
    /// Solver and refiner, e.g. p1p+hre, p3p+gn.
    #[arg(long, default_value = "p1p+hre", value_parser = parse_method)]
    pub method: Method,
    #[command(flatten)]
    pub ransac: RansacArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    /// RANSAC seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth sidecar; fills in the error metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output file (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Synthetic-scene configuration (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of scenes to write.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// e1, e2, e3, e4, hre3 or hre4.
    #[arg(value_parser = parse_experiment)]
    pub experiment: Experiment,
    /// Trials per setting; the configuration's value when omitted.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated methods; the experiment's defaults when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Synthetic-scene configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV output path; defaults to `<experiment>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-trial JSON output; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Measure wall time. Timed output differs between runs.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub ransac: RansacArgs,
    #[command(flatten)]
    pub tau: TauArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: groundpose::PoseError| e.to_string())
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse().map_err(|e: groundpose::PoseError| e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => commands::estimate(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
