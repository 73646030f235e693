mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::SchemaArgs;

/// Reluctant transfer learning for individualized treatment rules.
#[derive(Debug, Parser)]
#[command(name = "rtl", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the replicated simulation grid and write per-replication metrics and tables.
    Simulate(SimulateArgs),
    /// Fit one model on a trial CSV and write its model record.
    Fit(FitArgs),
    /// Cross-fitted held-out evaluation on a target trial CSV.
    Evaluate(EvaluateArgs),
    /// Re-aggregate metrics CSVs (including external ones) into tables.
    ExportTables(ExportArgs),
    /// Write the bundled two-site synthetic trial used by `evaluate`.
    Standin(StandinArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $RTL_OUTPUT_ROOT/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Replications per cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated shift scenarios (I, II, III).
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<String>>,
    /// Comma-separated coefficient regimes (weak_dense, sparse).
    #[arg(long, value_delimiter = ',')]
    pub regime: Option<Vec<String>>,
    /// Comma-separated source sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Comma-separated methods (RTL, TargOnly, TransLasso).
    #[arg(long)]
    pub methods: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Number of covariates.
    #[arg(long)]
    pub q: Option<usize>,
    /// Target sample size.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Test sample size used to compute true values.
    #[arg(long)]
    pub ntest: Option<usize>,
    /// Outcome noise standard deviation.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Extra metrics CSV (replication, method, value, C, IC, RMSE) merged into the tables.
    #[arg(long)]
    pub external: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// source, rtl, targonly or translasso.
    #[arg(long, default_value = "rtl")]
    pub method: String,
    /// Model record used as the source model for RTL.
    #[arg(long)]
    pub source_model: Option<PathBuf>,
    /// Separate source CSV (alternative to a split column).
    #[arg(long)]
    pub source_data: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trial CSV; target rows are split into evaluation folds.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model record used as the source model (otherwise fitted on the source rows).
    #[arg(long)]
    pub source_model: Option<PathBuf>,
    /// Separate source CSV (alternative to a split column).
    #[arg(long)]
    pub source_data: Option<PathBuf>,
    /// Number of evaluation folds on the target sample.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated methods (default: all three).
    #[arg(long)]
    pub methods: Option<String>,
    /// Known randomization probabilities per arm, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub propensity: Option<Vec<f64>>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Metrics CSVs written by `simulate`.
    #[arg(long = "data", alias = "records", required = true)]
    pub records: Vec<PathBuf>,
    /// Extra metrics CSVs; rows without cell columns join the single cell present.
    #[arg(long)]
    pub external: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StandinArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::ExportTables(a) => commands::export_tables(&a),
        Command::Standin(a) => commands::standin(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rtl: {e}");
            e.exit_code()
        }
    }
}
