//! `safeflow`: data generation, training, evaluation, benchmarks and the
//! streaming service.

mod commands;
mod live;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use safeflow::config::{ConfigError, RunConfig};
use safeflow::workflow::{DeployOptions, WorkflowError};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "safeflow", version, about = "Text-conditioned motion generation behind a three-stage safety gate")]
struct Cli {
    /// Run configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Copy, Default)]
struct DeployArgs {
    /// Euler steps of the deployed generator.
    #[arg(long)]
    nfe: Option<usize>,
    /// Deploy the unguided base flow instead of the distilled student.
    #[arg(long)]
    no_guidance: bool,
    /// Run without the safety gate.
    #[arg(long)]
    no_gates: bool,
}

impl From<DeployArgs> for DeployOptions {
    fn from(a: DeployArgs) -> Self {
        DeployOptions {
            nfe: a.nfe,
            no_guidance: a.no_guidance,
            no_gates: a.no_gates,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the motion dataset.
    GenData,
    /// Train the trajectory VAE.
    TrainVae,
    /// Train the latent velocity field.
    TrainFlow,
    /// Distill the guided teacher into a one-step student.
    DistillReflow,
    /// Fit the Stage-1 statistics and the Stage-2 threshold.
    CalibrateGates,
    /// Tracking table, window-level violation rates and the diversity study.
    Eval {
        /// One prompt per line for the scripted episodes.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Evaluate every variant without the safety gate.
        #[arg(long)]
        no_gates: bool,
    },
    /// Stage-1 OOD study and the R-quintile study.
    GateEval,
    /// Per-stage latency of the deployed pipeline.
    BenchLatency {
        #[command(flatten)]
        deploy: DeployArgs,
    },
    /// Interactive session: one prompt per line, `quit` to finish.
    Stream {
        #[command(flatten)]
        deploy: DeployArgs,
        /// Read prompts from a file instead of stdin.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Generator periods to run per prompt.
        #[arg(long, default_value_t = 10)]
        windows: u64,
        /// Use a running service instead of an in-process one, e.g. `http://127.0.0.1:7878`.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Host the HTTP/JSON and WebSocket service.
    Serve {
        #[command(flatten)]
        deploy: DeployArgs,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Playback speed of the realtime clock.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the effective configuration, marking untouched published defaults.
    Print,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Client(#[from] safeflow_client::ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Workflow(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Workflow(WorkflowError::Config(_)) => 2,
            CliError::Workflow(WorkflowError::Missing(_)) => 3,
            CliError::Workflow(WorkflowError::Diverged(_)) => 4,
            CliError::Workflow(WorkflowError::Version { .. }) => 5,
            _ => 1,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainVae => commands::train_vae(&cfg),
        Command::TrainFlow => commands::train_flow(&cfg),
        Command::DistillReflow => commands::distill(&cfg),
        Command::CalibrateGates => commands::calibrate(&cfg),
        Command::Eval { prompts, no_gates } => commands::eval(&cfg, prompts.as_deref(), no_gates),
        Command::GateEval => commands::gate_eval(&cfg),
        Command::BenchLatency { deploy } => commands::bench(&cfg, deploy.into()),
        Command::Stream {
            deploy,
            prompts,
            windows,
            connect,
        } => live::stream(&cfg, deploy.into(), prompts.as_deref(), windows, connect.as_deref()),
        Command::Serve { deploy, port, speed } => live::serve(&cfg, deploy.into(), port, speed),
        Command::Config { action: ConfigAction::Print } => {
            print!("{}", cfg.annotated());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
