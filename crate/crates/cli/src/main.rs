mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use shopalign_core::harness::HarnessError;
use shopalign_core::persona::MiningError;

use config::{GlobalArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "shopalign", version, about = "Persona-conditioned shopper simulation and alignment reports")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic catalog, session log and interest list into --out.
    SynthData(SynthArgs),
    /// Validate and index a catalog and session log.
    Ingest,
    /// Mine a persona for every customer with a non-empty history.
    MinePersonas,
    /// Run one task: query-gen, item-select-individual, item-select-group,
    /// session-gen, ab-test or dice-demo.
    Run(RunArgs),
    /// Print summaries of finished runs and rewrite their CSV files.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Query-generation group KL at several KDE bandwidths.
    SweepBandwidth(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub customers: usize,
    #[arg(long, default_value_t = 5)]
    pub recent_sessions: usize,
    #[arg(long, default_value_t = 3)]
    pub older_sessions: usize,
    #[arg(long, default_value_t = 4)]
    pub products_per_noun: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    pub task: String,
    /// Conditioning arms: base, profile, preferences, history, persona.
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
    /// Output subdirectory name (default `<task>-<seed>`).
    #[arg(long)]
    pub run_id: Option<String>,
    /// Item-selection cases to build.
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
    /// Random products from which distractors are drawn.
    #[arg(long, default_value_t = 1000)]
    pub pool_size: usize,
    /// Search results shown per group item-selection case.
    #[arg(long, default_value_t = 10)]
    pub rank_slots: usize,
    #[arg(long, default_value_t = 1)]
    pub sessions_per_subject: usize,
    /// Extra bandwidths for the query-generation KL.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub tosses: usize,
    /// A/B treatment: none, halve-prices:<category> or demote:<id>[,<id>..].
    #[arg(long, default_value = "none")]
    pub treatment: String,
    /// A/B population: llm (personas) or parametric.
    #[arg(long, default_value = "llm")]
    pub policy: String,
    #[arg(long)]
    pub target_query: Option<String>,
    #[arg(long)]
    pub price_ceiling: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub purchase_bias: f64,
    /// Parametric A/B sessions per variant.
    #[arg(long, default_value_t = 100)]
    pub ab_sessions: usize,
    /// disjoint or shared session seeds across A/B variants.
    #[arg(long, default_value = "disjoint")]
    pub seed_mode: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Backend(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Backend(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Backend(b) => CliError::Backend(b.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::Llm(b) => CliError::Backend(b.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.global)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::SynthData(a) => commands::synth_data(&cfg, &a),
        Command::Ingest => commands::ingest(&cfg),
        Command::MinePersonas => commands::mine_personas(&cfg),
        Command::Run(a) => commands::run_task(&cfg, &a),
        Command::Report { run_dirs } => commands::report(&run_dirs),
        Command::SweepBandwidth(a) => commands::sweep_bandwidth(&cfg, &a),
    }
}
