use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fastpt::optim::OptimizerKind;
use fastpt::partial::{DecoderPolicy, LayerStrategy, NeuronStrategy};
use fastpt::schedule::Preset;
use fastpt::tasks::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "fastpt", version, about = "Progressive prompt tuning on a tiny encoder-decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a backbone on the synthetic corpus.
    Pretrain(PretrainArgs),
    /// Vanilla prompt tuning on one (possibly partial) model.
    Tune(TuneArgs),
    /// Progressive prompt tuning over a schedule of growing partial models.
    Fpt(FptArgs),
    /// Activation scores of every FFN neuron.
    Profile(ProfileArgs),
    /// Modeled training cost of a schedule.
    Flops(FlopsArgs),
    /// Prompt similarity and embedding export over finished runs.
    Analyze(AnalyzeArgs),
    /// Compare layer or neuron selection strategies.
    Ablate(AblateArgs),
    /// Sweep the first-stage share of a two-stage schedule.
    SweepStages(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Root seed; overrides FASTPT_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelSource {
    /// Directory holding config.json and weights.bin.
    #[arg(long, conflicts_with = "config")]
    pub backbone: Option<PathBuf>,
    /// Model config; weights are freshly initialized from the seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    #[arg(long, default_value = "copy")]
    pub task: TaskKind,
    /// Seed of the generated dataset, independent of the run seed.
    #[arg(long, default_value_t = 0)]
    pub task_seed: u64,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long = "lr", default_value_t = 0.3)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value = "adafactor-simplified")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Dev examples per evaluation; 0 uses all.
    #[arg(long, default_value_t = 0)]
    pub eval_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub prompt_std: f32,
    /// Keep optimizer moments across stage boundaries.
    #[arg(long)]
    pub keep_optimizer: bool,
    /// Comma-separated seeds; each run goes to `<out>/seed<k>`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct StrategyArgs {
    #[arg(long, default_value = "uniform")]
    pub layer_strategy: LayerStrategy,
    #[arg(long, default_value = "activation")]
    pub neuron_strategy: NeuronStrategy,
    #[arg(long, default_value = "reduce")]
    pub decoder_policy: DecoderPolicy,
    /// Training examples used for activation profiling.
    #[arg(long, default_value_t = 256)]
    pub profile_samples: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 20000)]
    pub corpus_size: usize,
    #[arg(long = "lr", default_value_t = 2e-3)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// Fraction of layers kept in each stack.
    #[arg(long, default_value_t = 1.0)]
    pub depth: f64,
    /// Fraction of FFN neurons kept in each retained layer.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Print the cost report and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct FptArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    #[arg(long, required_unless_present = "schedule", conflicts_with = "schedule")]
    pub preset: Option<Preset>,
    /// Explicit schedule JSON.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Steps to allocate across preset stages.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Task whose training set sets the sequence lengths.
    #[arg(long, default_value = "copy")]
    pub task: TaskKind,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write cost.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directories written by `fpt`, one per task (and seed).
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Activation vs random neuron selection.
    Neuron,
    /// Uniform vs last-k layer selection.
    Layer,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "copy,reverse")]
    pub tasks: Vec<TaskKind>,
    #[arg(long, default_value_t = 0)]
    pub task_seed: u64,
    #[arg(long, value_enum, default_value = "neuron")]
    pub axis: Axis,
    /// Kept fraction along the ablated axis.
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long, default_value_t = 256)]
    pub profile_samples: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// First-stage shares of the total steps.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    pub fractions: Vec<f64>,
    /// Depth fraction of the first stage.
    #[arg(long, default_value_t = 0.75)]
    pub depth: f64,
    /// Width fraction of the first stage.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
}
