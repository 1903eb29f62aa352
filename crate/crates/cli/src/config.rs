//! Run configuration: the resolved, serializable form of a command line.
//! Every artifact embeds one, and `--config` replays it.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use sde_fim::datagen::{CorruptionConfig, PriorConfig};
use sde_fim::eval::{BaseKernel, MmdConfig};
use sde_fim::training::{FinetuneConfig, LrSchedule, TrainConfig};
use sde_fim::ModelConfig;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 1D systems, ~0.5M-parameter model, 2000 steps
    #[default]
    Toy,
    /// all dimensions, longer contexts and training
    Small,
}

impl Preset {
    pub fn count(self) -> usize {
        match self {
            Preset::Toy => 5000,
            Preset::Small => 20000,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            Preset::Toy => vec![1],
            Preset::Small => vec![1, 2, 3],
        }
    }

    pub fn prior(self) -> PriorConfig {
        PriorConfig::desk()
    }

    pub fn model(self) -> ModelConfig {
        ModelConfig::default()
    }

    pub fn train(self, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            seed,
            lr: 1e-3,
            grad_clip: Some(1.0),
            schedule: LrSchedule::WarmupCosine { warmup: 100, floor: 0.05 },
            ..TrainConfig::default()
        };
        match self {
            Preset::Toy => TrainConfig { steps: 2000, context_max: 256, ..base },
            Preset::Small => TrainConfig { steps: 20000, context_max: 1024, ..base },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub preset: Preset,
    pub command: CommandConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum CommandConfig {
    Generate(GenerateArgs),
    Train(TrainArgs),
    Infer(InferArgs),
    Finetune(FinetuneArgs),
    Simulate(SimulateArgs),
    Evaluate(EvaluateArgs),
    Catalog(CatalogArgs),
}

impl CommandConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CommandConfig::Generate(_) => "generate",
            CommandConfig::Train(_) => "train",
            CommandConfig::Infer(_) => "infer",
            CommandConfig::Finetune(_) => "finetune",
            CommandConfig::Simulate(_) => "simulate",
            CommandConfig::Evaluate(_) => "evaluate",
            CommandConfig::Catalog(_) => "catalog",
        }
    }
}

/// One `lo:hi` interval.
pub fn parse_bound(part: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = part.split_once(':').ok_or_else(|| format!("bound `{part}` is not lo:hi"))?;
    let lo = lo.trim().parse().map_err(|_| format!("bad bound `{lo}`"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad bound `{hi}`"))?;
    Ok((lo, hi))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct GenerateArgs {
    /// Number of accepted equations
    #[arg(long)]
    pub count: Option<usize>,
    /// Restrict to these dimensions, e.g. `1` or `1,2`
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Skip noise and thinning
    #[arg(long)]
    #[serde(default)]
    pub clean: bool,
    /// Use the full-size observation grids instead of the desk-scale ones
    #[arg(long)]
    #[serde(default)]
    pub full_grids: bool,
    #[arg(skip)]
    pub prior: Option<PriorConfig>,
    #[arg(skip)]
    pub corruption: Option<CorruptionConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct TrainArgs {
    /// Dataset produced by `generate`
    #[arg(long)]
    pub data: PathBuf,
    /// Total optimizer steps (absolute, also when resuming)
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub context_min: Option<usize>,
    #[arg(long)]
    pub context_max: Option<usize>,
    #[arg(long)]
    pub locations: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Hidden size of the model
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Write `<out>.step<k>` every k steps (0 disables)
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by `train`
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Held-out dataset for the validation column of the log
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    #[serde(default)]
    pub val_every: u64,
    #[arg(skip)]
    pub model: Option<ModelConfig>,
    #[arg(skip)]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct ContextArgs {
    /// Dataset file or CSV series (header `time,x1,..` with optional `series` column)
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Record index when the context is a dataset
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub record: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct GridArgs {
    /// Catalog system whose bounds define the grid
    #[arg(long)]
    pub system: Option<String>,
    /// Explicit bounds `lo:hi,lo:hi`
    #[arg(long, value_parser = parse_bound, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Total grid locations
    #[arg(long, default_value_t = 1024)]
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    1024
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub context: ContextArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// CSV of query locations (header `x1,..`), instead of a grid
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Also write `location, drift, amplitude, uncertainty` rows here
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Dense,
    Sparse,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub context: ContextArgs,
    #[arg(long, value_enum, default_value_t = Mode::Dense)]
    #[serde(default)]
    pub mode: Mode,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub context_max: Option<usize>,
    #[arg(skip)]
    pub finetune: Option<FinetuneConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct SimulateArgs {
    /// Catalog system to simulate
    #[arg(long)]
    pub system: Option<String>,
    /// Simulate a model instead, conditioned on `--context`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub context: ContextArgs,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub observations: Option<usize>,
    #[arg(long)]
    pub obs_gap: Option<f64>,
    /// Euler–Maruyama steps per observation gap
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Initial state `x1,x2,..`; defaults to the catalog initial condition
    #[arg(long, value_delimiter = ',')]
    pub init: Option<Vec<f64>>,
    /// Relative observation noise
    #[arg(long, default_value_t = 0.0)]
    #[serde(default)]
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Mmd,
    #[default]
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Linear,
    #[default]
    Rbf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct EvaluateArgs {
    /// Catalog system providing the ground truth
    #[arg(long)]
    pub system: String,
    #[arg(long, value_enum, default_value_t = Metric::All)]
    #[serde(default)]
    pub metric: Metric,
    /// Model to evaluate; omit together with `--truth`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the ground-truth system itself
    #[arg(long)]
    #[serde(default)]
    pub truth: bool,
    #[command(flatten)]
    pub context: ContextArgs,
    #[arg(long, default_value_t = 1024)]
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Reference CSV; simulated from the catalog when absent
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Override the catalog reference path count
    #[arg(long)]
    pub reference_paths: Option<usize>,
    /// Override the catalog reference observation count
    #[arg(long)]
    pub reference_observations: Option<usize>,
    #[arg(long, default_value_t = 5)]
    #[serde(default = "default_level")]
    pub level: usize,
    #[arg(long, value_enum, default_value_t = KernelChoice::Rbf)]
    #[serde(default)]
    pub kernel: KernelChoice,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Cap on repeated segment indices in the signature recursion
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long, default_value_t = 1)]
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Grid MSE for each context size of the ablation
    #[arg(long)]
    #[serde(default)]
    pub context_sweep: bool,
    /// Override the sweep sizes
    #[arg(long, value_delimiter = ',')]
    pub sweep_sizes: Option<Vec<usize>>,
}

fn default_level() -> usize {
    5
}

fn default_substeps() -> usize {
    1
}

impl EvaluateArgs {
    pub fn mmd_config(&self) -> MmdConfig {
        let kernel = match self.kernel {
            KernelChoice::Linear => BaseKernel::Linear,
            KernelChoice::Rbf => BaseKernel::Rbf { bandwidth: self.bandwidth },
        };
        MmdConfig { level: self.level, kernel, order: self.order }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
pub struct CatalogArgs {
    /// Print one entry in full
    #[arg(long)]
    pub system: Option<String>,
}
