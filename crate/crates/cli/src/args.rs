use std::path::PathBuf;

use cbdrive_core::data::SyntheticSpec;
use cbdrive_core::model::Task;
use cbdrive_core::training::AblationSize;
use cbdrive_core::{ModelConfig, Profile, TrainConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cbdrive",
    version,
    about = "Concept-bottleneck driving models: data, training, evaluation and explanations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Template, deduplicate and merge concept lists.
    Curate(CurateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write explanation reports for sequences.
    Explain(ExplainArgs),
    /// Bottleneck-size ablation.
    Ablate(AblateArgs),
    /// Time inference.
    Bench(BenchArgs),
    /// Re-execute a run from its run.json.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub sequences: usize,
    /// Defaults to the profile's length, or 20.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Defaults to the profile's rate, or 1.
    #[arg(long)]
    pub fps: Option<f32>,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 24)]
    pub concepts: usize,
    #[arg(long, default_value_t = 3)]
    pub informative: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value = "none")]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenDataArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let shape = self.profile.shape();
        SyntheticSpec {
            n_sequences: self.sequences,
            frames: self.frames.or(shape.map(|s| s.0)).unwrap_or(20),
            embed_dim: self.embed_dim,
            concepts: self.concepts,
            seed: self.seed,
            noise_std: self.noise_std,
            informative: self.informative,
            profile: self.profile,
            fps: self.fps.or(shape.map(|s| s.1)).unwrap_or(1.0),
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct CurateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Human-written scenario list, one per line.
    #[arg(long)]
    pub human: Option<PathBuf>,
    /// Embeddings for `--human`, one row per non-blank line.
    #[arg(long, requires = "human")]
    pub human_embeddings: Option<PathBuf>,
    /// Generated scenario list, one per line.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long, requires = "generated")]
    pub generated_embeddings: Option<PathBuf>,
    /// Train one model per list (and on the merged list) and write compare.csv.
    #[arg(long, requires_all = ["manifest", "seed"])]
    pub compare: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainingArgs,
}

/// A concept list other than the manifest's own.
#[derive(Args, Debug, Clone)]
pub struct ConceptArgs {
    #[arg(long, requires = "embeddings")]
    pub concepts: Option<PathBuf>,
    #[arg(long, requires = "concepts")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub concepts: ConceptArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainingArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// split.json written by `train`; evaluates its test ids. Without it every
    /// sequence is evaluated.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = cbdrive_core::data::DEFAULT_DISTANCE_CAP)]
    pub distance_cap: f64,
    #[command(flatten)]
    pub concepts: ConceptArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ExplainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence ids to explain; defaults to the split's test ids, or all.
    #[arg(long = "sequence")]
    pub sequences: Vec<String>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window_frames: usize,
    #[arg(long, default_value_t = 10)]
    pub k_per_frame: usize,
    #[arg(long, default_value_t = 2.5)]
    pub z_threshold: f64,
    #[arg(long, default_value_t = 4)]
    pub min_gap: usize,
    #[arg(long, default_value_t = 4)]
    pub hold_off: usize,
    #[command(flatten)]
    pub concepts: ConceptArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "24,48,100,300,full")]
    pub sizes: Vec<AblationSize>,
    /// Subset draws per size; draw seeds are derived from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[command(flatten)]
    pub concepts: ConceptArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainingArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Times this checkpoint; otherwise a freshly initialized model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bottleneck size of the fresh model.
    #[arg(long, default_value_t = 24)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,240")]
    pub frames: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub run_json: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub tasks: Option<Task>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self, k: usize, default_tasks: Task) -> ModelConfig {
        let d = ModelConfig::default().with_concepts(k);
        ModelConfig {
            model_dim: self.model_dim.unwrap_or(d.model_dim),
            n_layers: self.layers.unwrap_or(d.n_layers),
            n_heads: self.heads.unwrap_or(d.n_heads),
            window: self.window.unwrap_or(d.window),
            ffn_dim: self.ffn_dim.unwrap_or(d.ffn_dim),
            dropout_rate: self.dropout.unwrap_or(d.dropout_rate),
            tasks: self.tasks.unwrap_or(default_tasks),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            ..d
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub distance_cap: Option<f64>,
}

impl TrainingArgs {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            grad_clip: self.grad_clip.or(d.grad_clip),
            distance_cap: self.distance_cap.unwrap_or(d.distance_cap),
            seed,
            ..d
        }
    }
}
