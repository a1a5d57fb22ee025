use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use fcm_core::estimator::Solver;
use fcm_core::FcmError;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] FcmError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(FcmError::Io { .. }) => 1,
            CliError::Core(FcmError::NearSingular { .. }) => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fcmlab", version, about = "Functional convolution model: estimation and identifiability diagnostics")]
pub struct Cli {
    /// JSON file with default option values; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverArg {
    Direct,
    Svd,
    Ridge,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Direct => Solver::Direct,
            SolverArg::Svd => Solver::TruncatedSvd,
            SolverArg::Ridge => Solver::Ridge,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a design from a JSON simulation spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (manifest.json, curve CSVs, truth.json).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Least-squares fit of a design.
    Fit {
        #[arg(long)]
        design: PathBuf,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
        /// Second-difference penalty weight (ridge solver).
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        /// Relative eigenvalue threshold of the direct solver's pivot test.
        #[arg(long)]
        pivot_tol: Option<f64>,
        /// Relative truncation threshold of the SVD solver.
        #[arg(long)]
        svd_tol: Option<f64>,
        /// Fall back to the minimum-norm solution instead of failing.
        #[arg(long)]
        allow_rank_deficient: bool,
        /// truth.json from `simulate`; adds the relative coefficient error.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identifiability diagnostics: Gram spectrum and self-similarity.
    Diagnose {
        #[arg(long)]
        design: PathBuf,
        /// Relative eigenvalue tolerance of the Gram spectrum.
        #[arg(long)]
        tol: Option<f64>,
        /// Relative singular-value tolerance of the self-similarity order.
        #[arg(long)]
        rank_tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Writes the Gram eigenvalues as CSV.
        #[arg(long)]
        spectrum_csv: Option<PathBuf>,
        /// Writes residual-versus-order curves as CSV.
        #[arg(long)]
        residual_csv: Option<PathBuf>,
    },
    /// Down-sample to a scalar-response functional linear model.
    Downsample {
        #[arg(long)]
        design: PathBuf,
        /// Sampling interval, a multiple of the grid step.
        #[arg(long = "U", alias = "u", allow_negative_numbers = true)]
        spacing: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also fits the down-sampled model and writes the coefficients here.
        #[arg(long)]
        fit_out: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
    },
    /// Runs a named acceptance experiment and prints PASS/FAIL per check.
    Reproduce {
        #[arg(long, required_unless_present = "list")]
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Writes the experiment report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Option defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub solver: Option<SolverArg>,
    pub lambda: Option<f64>,
    pub pivot_tol: Option<f64>,
    pub svd_tol: Option<f64>,
    pub allow_rank_deficient: Option<bool>,
    pub tol: Option<f64>,
    pub rank_tol: Option<f64>,
    #[serde(rename = "U")]
    pub spacing: Option<f64>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| FcmError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Rejects an output path that would overwrite an input.
pub fn distinct(input: &Path, output: &Path) -> Result<(), CliError> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(input) == canon(output) {
        return Err(CliError::Usage(format!(
            "output {} would overwrite input",
            output.display()
        )));
    }
    Ok(())
}

pub fn check_range(name: &str, value: f64, lo: f64, hi: f64) -> Result<f64, CliError> {
    if !(value >= lo && value <= hi) {
        return Err(CliError::Usage(format!(
            "--{name} must lie in [{lo}, {hi}], got {value}"
        )));
    }
    Ok(value)
}

/// Sizes the global thread pool from `FCMLAB_THREADS`.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FCMLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("FCMLAB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}
