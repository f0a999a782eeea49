//! `mfdi`: batch front-end for solving, simulating and estimating the
//! disability model with collective health claims.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mfdi_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        use mfdi_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_) | E::Domain(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mfdi",
    version,
    about = "Reserves for disability coverages with collective health claims"
)]
struct Cli {
    /// Worker threads for simulation samples and solver stages.
    #[arg(long, global = true, env = "MFDI_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the forward equations and value the annuity.
    Solve(SolveArgs),
    /// Monte Carlo reserves, event logs, group-average paths and histograms.
    Simulate(SimulateArgs),
    /// Partial log-likelihoods and occurrence-exposure rates from an event log.
    Estimate(EstimateArgs),
    /// Mean-field, Monte Carlo and one-individual reserves side by side.
    Table2(Table2Args),
    /// Repeated Monte Carlo estimates per group size.
    Table3(Table3Args),
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// Scenario file (TOML); the disability preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the collective coupling strength.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Override the credibility cap.
    #[arg(long)]
    pub zeta0: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Step length of the time and duration grid.
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    /// Maximal health-claim count on the grid.
    #[arg(long = "k-h", default_value_t = 20)]
    pub k_h: usize,
    /// Choose the claim cut-off from a Poisson tail bound instead of --k-h.
    #[arg(long)]
    pub err: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "mfdi-out")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArg {
    Classic,
    Health,
    Meanfield,
    #[value(name = "true-n1")]
    TrueN1,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, value_enum, default_value_t = ModelArg::Meanfield)]
    pub model: ModelArg,
    /// Condition on an initial state (name) instead of the initial distribution.
    #[arg(long)]
    pub from_state: Option<String>,
    /// Also write the full probability grid (large for small eta).
    #[arg(long)]
    pub write_grid: bool,
    /// Fail when total probability mass drifts from 1 by more than this.
    #[arg(long)]
    pub max_drift: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Group sizes.
    #[arg(long, value_delimiter = ',', default_value = "25")]
    pub n: Vec<usize>,
    /// Monte Carlo samples per group size.
    #[arg(long = "samples", alias = "M", short = 'M', default_value_t = 40_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Bins of the present-value histogram; 0 disables it.
    #[arg(long, default_value_t = 40)]
    pub histogram_bins: usize,
    /// Write event logs, group-average paths and rate series for the first K samples.
    #[arg(long, default_value_t = 0)]
    pub paths: usize,
    /// Write an estimation data set with this many independent companies.
    #[arg(long)]
    pub companies: Option<usize>,
    /// Censoring time of the estimation data set (defaults to T).
    #[arg(long)]
    pub censoring: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Event log with `company,censoring_time` columns.
    #[arg(long)]
    pub events: PathBuf,
    /// Calendar-time bucket edges (defaults to one bucket).
    #[arg(long, value_delimiter = ',')]
    pub t_edges: Option<Vec<f64>>,
    /// Duration bucket edges (defaults to one bucket).
    #[arg(long, value_delimiter = ',')]
    pub u_edges: Option<Vec<f64>>,
    /// Separate claim counts 0..CAP, pooling counts >= CAP; pooled when omitted.
    #[arg(long)]
    pub h_cap: Option<usize>,
    /// Number of quantile buckets of the group average.
    #[arg(long, default_value_t = 5)]
    pub y_quantiles: usize,
    /// Explicit group-average bucket edges (instead of quantiles).
    #[arg(long, value_delimiter = ',')]
    pub y_edges: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct Table2Args {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,25,50,100")]
    pub n: Vec<usize>,
    #[arg(long = "samples", alias = "M", short = 'M', default_value_t = 40_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct Table3Args {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,5,25")]
    pub n: Vec<usize>,
    #[arg(long = "samples", alias = "M", short = 'M', default_value_t = 40_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {threads} threads: {e}")))?;
    }
    match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Table2(a) => commands::table2(&a),
        Command::Table3(a) => commands::table3(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
