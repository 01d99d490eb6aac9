//! Command-line front end: CSV ingestion, fitting, clustering, simulation
//! studies and diagnostics.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod documents;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "loadgp", version, about = "Aggregated load-curve models for electricity substations")]
pub struct Cli {
    /// Seed of every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// TOML file with default settings.
    #[arg(long, global = true, env = "LOADGP_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the aggregated model and write fit.json.
    Fit(FitArgs),
    /// Fit a mixture of aggregated models and write mixture.json.
    Cluster(ClusterArgs),
    /// Generate scenario panels, optionally running the study fits.
    Simulate(SimulateArgs),
    /// Residuals, fMSRE, typical curves and signal-to-noise of a fit.
    Diagnose(DiagnoseArgs),
    /// Likelihood-ratio test and BIC between two fit.json files.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub loads: PathBuf,
    #[arg(long)]
    pub market: PathBuf,
    #[arg(long, requires = "locations")]
    pub temperature: Option<PathBuf>,
    /// `substation,location` map for the temperature file.
    #[arg(long, requires = "temperature")]
    pub locations: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Length of the daily period in hours.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// homogeneous-uniform, homogeneous or complete.
    #[arg(long)]
    pub covariance: Option<String>,
    #[arg(long)]
    pub time_basis: Option<usize>,
    #[arg(long)]
    pub temperature_basis: Option<usize>,
    #[arg(long)]
    pub variance_basis: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Skip the covariance-parameter Hessian.
    #[arg(long)]
    pub no_hessian: bool,
    /// Covariates to include (defaults to every covariate in the file).
    #[arg(long = "use-covariates", value_delimiter = ',')]
    pub use_covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Random initial partitions.
    #[arg(long)]
    pub trials: Option<usize>,
    /// truth.json of a simulated replicate, to report cluster recovery.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Preset scenario 1-8.
    #[arg(long)]
    pub scenario: u32,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Multiplies every true covariance scale.
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Also fit every replicate and write study.json.
    #[arg(long)]
    pub study: bool,
    /// Random initial partitions of the study mixtures.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// fit.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write residuals.csv with every relative residual.
    #[arg(long)]
    pub residuals_csv: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub nested: PathBuf,
    #[arg(long)]
    pub larger: PathBuf,
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let file = config::FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.output_dir).map_err(|e| CliError::io(&cli.output_dir, e))?;
    match &cli.command {
        Command::Fit(a) => commands::fit(cli, &file, a),
        Command::Cluster(a) => commands::cluster(cli, &file, a),
        Command::Simulate(a) => commands::simulate(cli, &file, a),
        Command::Diagnose(a) => commands::diagnose(cli, &file, a),
        Command::Compare(a) => commands::compare(cli, a),
    }
}
