//! Command-line pipeline: dataset generation, pretraining, zero-shot
//! inference, finetuning, simulation and evaluation.
//!
//! Each command is first resolved into a [`RunConfig`] with every default
//! filled in. That config is embedded in the artifacts the command writes,
//! and `--config <artifact>` replays it.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{CommandConfig, Preset, RunConfig};
pub use error::{CliError, CliResult};

use config::{CatalogArgs, EvaluateArgs, FinetuneArgs, GenerateArgs, InferArgs, SimulateArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "sde-fim", version, about = "Zero-shot drift and diffusion estimation for low-dimensional SDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// Root seed for every random draw
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replay a run config (JSON) or the config embedded in an artifact
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Primary output file
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample synthetic SDEs and their observations
    Generate(GenerateArgs),
    /// Pretrain the recognition model on a dataset
    Train(TrainArgs),
    /// Zero-shot drift and diffusion estimates from a context series
    Infer(InferArgs),
    /// Finetune a checkpoint on one target series
    Finetune(FinetuneArgs),
    /// Simulate a catalog system or a conditioned model
    Simulate(SimulateArgs),
    /// Grid MSE and signature-kernel MMD against a catalog system
    Evaluate(EvaluateArgs),
    /// List or print the canonical systems
    Catalog(CatalogArgs),
}

impl From<Command> for CommandConfig {
    fn from(c: Command) -> Self {
        match c {
            Command::Generate(a) => CommandConfig::Generate(a),
            Command::Train(a) => CommandConfig::Train(a),
            Command::Infer(a) => CommandConfig::Infer(a),
            Command::Finetune(a) => CommandConfig::Finetune(a),
            Command::Simulate(a) => CommandConfig::Simulate(a),
            Command::Evaluate(a) => CommandConfig::Evaluate(a),
            Command::Catalog(a) => CommandConfig::Catalog(a),
        }
    }
}

/// Caps rayon workers from `SDE_FIM_THREADS`.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("SDE_FIM_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Config(format!("SDE_FIM_THREADS=`{v}` is not a count")))?;
        // A second initialisation in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

/// Builds the run config from the command line (or the replayed one) and
/// executes it. Returns a short human-readable summary.
pub fn run(cli: Cli) -> CliResult<String> {
    init_threads()?;
    let mut rc = match (&cli.config, cli.command) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either a subcommand or --config, not both".into())),
        (Some(path), None) => {
            let mut rc = commands::load_run_config(path)?;
            if let Some(s) = cli.seed {
                rc.seed = s;
            }
            rc
        }
        (None, Some(cmd)) => RunConfig {
            version: config::RUN_CONFIG_VERSION,
            seed: cli.seed.unwrap_or(0),
            preset: cli.preset.unwrap_or_default(),
            command: cmd.into(),
        },
        (None, None) => return Err(CliError::Config("no command given; see --help".into())),
    };
    commands::resolve(&mut rc)?;
    commands::execute(&rc, cli.out.as_deref())
}
