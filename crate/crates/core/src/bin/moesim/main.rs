mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use moesim::engine::{EngineError, Strategy};
use moesim::trace::TraceError;

use config::{ExperimentConfig, TraceSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidSpec(_) | TraceError::InvalidParams(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Fabric(_) => CliError::Config(e.to_string()),
            EngineError::Mismatch(_) | EngineError::Trace(_) => CliError::Data(e.to_string()),
            EngineError::Invariant(_) | EngineError::Placement(_) => {
                CliError::Invariant(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "moesim",
    version,
    about = "MoE expert-trace analytics and multi-chiplet serving simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Trace file to write (`.gz` compresses); defaults to <out-dir>/<model>_trace.jsonl.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compute expert-selection statistics.
    Profile {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate decode serving under each strategy.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Build a comparison table from saved run reports.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Run report JSON files written by `simulate`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "MOESIM_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Model preset (qwen3, deepseek_v3, llama4_maverick).
    #[arg(long)]
    model: Option<String>,
    /// Keep only the first N MoE layers.
    #[arg(long)]
    moe_layers: Option<usize>,
    /// Topology preset (dojo, tsmc_sow).
    #[arg(long)]
    topology: Option<String>,
    /// Read this trace file instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Synthetic request count.
    #[arg(long)]
    requests: Option<usize>,
    /// Synthetic decode tokens per request.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
}

impl Common {
    /// File values, then env/flag overrides.
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.model {
            c.model.preset = v.clone();
        }
        if let Some(v) = self.moe_layers {
            c.model.moe_layers = Some(v);
        }
        if let Some(v) = &self.topology {
            c.topology.preset = v.clone();
        }
        if let Some(p) = &self.trace {
            c.trace = Some(TraceSection {
                path: p.clone(),
                lenient: c.trace.as_ref().is_some_and(|t| t.lenient),
            });
            c.synth = None;
        }
        if self.requests.is_some() || self.tokens.is_some() {
            if c.trace.is_some() {
                return Err(CliError::Config(
                    "--requests/--tokens apply to synthetic traces only".into(),
                ));
            }
            let s = c.synth.get_or_insert_with(Default::default);
            if let Some(v) = self.requests {
                s.num_requests = v;
            }
            if let Some(v) = self.tokens {
                s.tokens_per_request = v;
            }
        }
        if let Some(v) = self.batch_size {
            c.sim.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            c.sim.max_steps = Some(v);
        }
        if let Some(list) = &self.strategies {
            c.strategies = list
                .iter()
                .map(|s| s.trim().parse::<Strategy>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, output } => commands::gen(&common.resolve()?, output),
        Command::Profile { common } => commands::profile(&common.resolve()?),
        Command::Simulate { common } => commands::simulate(&common.resolve()?),
        Command::Compare { common, reports } => commands::compare(&common.resolve()?, &reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moesim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
