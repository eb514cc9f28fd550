use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "condspec",
    version,
    about = "Outcome-conditional power spectra for replicated multivariate time series"
)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with default values for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the sampler on a dataset and write a chain checkpoint.
    Fit(FitArgs),
    /// Evaluate band curves and spectral surfaces from a checkpoint.
    Summarize(SummarizeArgs),
    /// Write one MA(2) dataset in the ingest CSV layout.
    Simulate(SimulateArgs),
    /// Run the replicated MA(2) comparison study.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frequency basis rank, or `auto`.
    #[arg(long = "n-j")]
    pub n_j: Option<String>,
    /// Outcome basis rank, or `auto`.
    #[arg(long = "n-h")]
    pub n_h: Option<String>,
    #[arg(long)]
    pub sigma2_alpha: Option<f64>,
    #[arg(long)]
    pub g_scale: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub proposal_df: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// none, mean or linear.
    #[arg(long)]
    pub detrend: Option<String>,
    /// Continue an earlier chain up to `--iters` total iterations.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Band for power and coherence curves and the ratio denominator, `lo:hi`.
    #[arg(long)]
    pub band: Option<String>,
    /// Numerator band of the ratio curves, `lo:hi`.
    #[arg(long)]
    pub lf_band: Option<String>,
    #[arg(long)]
    pub u_points: Option<usize>,
    /// Also write coherence-derivative curves.
    #[arg(long)]
    pub derivatives: bool,
    /// Fail unless the checkpoint carries this config hash.
    #[arg(long)]
    pub expect_config_hash: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of subjects.
    #[arg(long = "N", alias = "subjects")]
    pub subjects: Option<usize>,
    /// Series length.
    #[arg(long = "n", alias = "length")]
    pub length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Stage1Arg {
    Average,
    Sum,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long = "N", alias = "subjects")]
    pub subjects: Option<usize>,
    #[arg(long = "n", alias = "length")]
    pub length: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicates: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub u_points: Option<usize>,
    #[arg(long, value_enum)]
    pub stage1: Option<Stage1Arg>,
    #[arg(long)]
    pub bandwidth_factor: Option<f64>,
    /// `coverage:lo:hi` or `ise-dominance`; repeatable.
    #[arg(long = "assert")]
    pub asserts: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, files or configuration: exit 2.
    Usage(String),
    /// Library failure, mapped to 2 or 3.
    Core(condspec::Error),
    /// A `--assert` check did not hold: exit 1.
    Assertion(String),
}

impl From<condspec::Error> for CliError {
    fn from(e: condspec::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
            CliError::Assertion(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let threads = config::pick(cli.threads, &file.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    match cli.command {
        Command::Fit(a) => commands::fit(a, &file, threads),
        Command::Summarize(a) => commands::summarize(a, &file, threads),
        Command::Simulate(a) => commands::simulate(a, &file),
        Command::Study(a) => commands::study(a, &file, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("condspec: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
