//! Batch front door: config-driven pipeline runs and standalone stages.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Categorized failure; the category fixes the process exit code and the
/// machine-readable error report.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn config<S: Into<String>>(msg: S) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data<S: Into<String>>(msg: S) -> Self {
        CliError::Data(msg.into())
    }

    pub fn numeric<S: Into<String>>(msg: S) -> Self {
        CliError::Numeric(msg.into())
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ppp_gibbs::DataError> for CliError {
    fn from(e: ppp_gibbs::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ppp_gibbs::SynthError> for CliError {
    fn from(e: ppp_gibbs::SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ppp_gibbs::PolicyError> for CliError {
    fn from(e: ppp_gibbs::PolicyError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ppp_gibbs::SamplerError> for CliError {
    fn from(e: ppp_gibbs::SamplerError) -> Self {
        use ppp_gibbs::SamplerError::*;
        match e {
            Io { .. } | MalformedChainFile { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ppp_gibbs::FrontierError> for CliError {
    fn from(e: ppp_gibbs::FrontierError) -> Self {
        match e {
            ppp_gibbs::FrontierError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ppp_gibbs::DiagnosticsError> for CliError {
    fn from(e: ppp_gibbs::DiagnosticsError) -> Self {
        match e {
            ppp_gibbs::DiagnosticsError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ppp_gibbs::PredictiveError> for CliError {
    fn from(e: ppp_gibbs::PredictiveError) -> Self {
        match e {
            ppp_gibbs::PredictiveError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ppp_gibbs::AttributionError> for CliError {
    fn from(e: ppp_gibbs::AttributionError) -> Self {
        use ppp_gibbs::AttributionError::*;
        match e {
            Io { .. } | Csv { .. } | NonFinite { .. } | MissingColumn(_)
            | MonthNotCovered(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ppp-gibbs",
    about = "Gibbs-posterior estimation of characteristic-based portfolio policies",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "ppp.toml")]
    config: PathBuf,
    /// Override the configured base seed (env: PPP_GIBBS_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap, 0 = library default (env: PPP_GIBBS_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the configured output directory (env: PPP_GIBBS_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline per window end: sweep, chains at lambda-star,
    /// predictive reports, diagnostics, optional attribution, manifest.
    Run,
    /// Validate the panel file and report its shape.
    IngestCheck,
    /// Lambda-grid sweep: frontier CSV and per-lambda summaries.
    Sweep,
    /// Chains at lambda-star (from the persisted frontier) or at --lambda.
    Sample {
        /// Sample at this lambda instead of the selected one.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Posterior-predictive summary and density CSVs from persisted chains.
    Predict,
    /// Convergence diagnostics over persisted chains.
    Diagnose {
        /// Explicit chain CSVs (sidecar JSONs alongside); defaults to the
        /// configured windows' chains.
        #[arg(long, num_args = 1..)]
        chains: Option<Vec<PathBuf>>,
    },
    /// Factor regression of out-of-sample returns.
    Attribute,
    /// Generate the configured synthetic panel CSV.
    Synth,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(&cli.config)?;
    config.apply_overrides(cli.seed, cli.workers, cli.out)?;
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size worker pool: {e}")))?;
    }
    match cli.command {
        Command::Run => {
            pipeline::stage_run(&config)?;
            println!("run complete; outputs under {}", config.out_dir.display());
        }
        Command::IngestCheck => {
            let summary = pipeline::stage_ingest_check(&config)?;
            println!("{summary}");
        }
        Command::Sweep => {
            let panel = pipeline::load_configured_panel(&config)?;
            pipeline::stage_sweep(&config, &panel)?;
            println!("sweep complete");
        }
        Command::Sample { lambda } => {
            let panel = pipeline::load_configured_panel(&config)?;
            pipeline::stage_sample(&config, &panel, lambda)?;
            println!("sampling complete");
        }
        Command::Predict => {
            let panel = pipeline::load_configured_panel(&config)?;
            pipeline::stage_predict(&config, &panel)?;
            println!("predictive reports written");
        }
        Command::Diagnose { chains } => match chains {
            Some(paths) => {
                let report = pipeline::diagnose_files(&paths, None)?;
                println!("{report}");
            }
            None => {
                pipeline::stage_diagnose(&config)?;
                println!("diagnostics written");
            }
        },
        Command::Attribute => {
            let panel = pipeline::load_configured_panel(&config)?;
            pipeline::stage_attribute(&config, &panel)?;
            println!("attribution written");
        }
        Command::Synth => {
            let path = pipeline::stage_synth(&config)?;
            println!("synthetic panel written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.kind(), "message": err.message() })
            );
            ExitCode::from(err.exit_code())
        }
    }
}
