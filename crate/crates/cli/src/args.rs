//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lrlm_core::costmodel::Precision;
use lrlm_core::distsim::BACKWARD_FACTOR;
use lrlm_core::trainer::Method;
use lrlm_core::transformer::MatrixName;
use lrlm_core::RecomputePolicy;
use serde::Serialize;

use crate::checkpoint::FloatFormat;

#[derive(Debug, Parser, Serialize)]
#[command(name = "lrlm", version, about = "Low-rank language-model experiments and planners")]
pub struct Cli {
    /// Seed for initialization and batch sampling (default: the config's,
    /// else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory receiving one `<timestamp>-<seed>` folder per run.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train from scratch (dense, low-rank, or blended into low-rank).
    Pretrain(PretrainArgs),
    /// Replace dense matrices of a checkpoint by truncated-SVD factors.
    Decompose(DecomposeArgs),
    /// Attach LoRA adapters to a checkpoint and train only them.
    Finetune(FinetuneArgs),
    /// Quantize matrices of a checkpoint per row.
    Quantize(QuantizeArgs),
    /// Fold LoRA adapters into dense weights.
    Merge(MergeArgs),
    /// Greedy generation from a prompt.
    Infer(InferArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Closed-form planners; they never allocate model tensors.
    Plan {
        #[command(subcommand)]
        what: PlanCommand,
    },
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanCommand {
    /// Parameter table per module.
    Params(PlanParamsArgs),
    /// Training memory: parameters, gradients, optimizer, activations.
    Mem(PlanMemArgs),
    /// Training FLOPs and recompute overhead, or inference workload with
    /// `--gen`.
    Flops(PlanFlopsArgs),
    /// Fill-drain pipeline schedule.
    Pipeline(PlanPipelineArgs),
    /// Optimizer-state sharding and offload.
    Shard(PlanShardArgs),
    /// Federated traffic.
    Federated(PlanFederatedArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Dense,
    Lowrank,
    Lora,
    Quantized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArg {
    #[default]
    StoreAll,
    PerLayer,
    /// Drop the attention scores and their softmax.
    Selective,
}

impl PolicyArg {
    pub fn policy(self) -> RecomputePolicy {
        match self {
            PolicyArg::StoreAll => RecomputePolicy::StoreAll,
            PolicyArg::PerLayer => RecomputePolicy::PerLayer,
            PolicyArg::Selective => RecomputePolicy::selective_scores(),
        }
    }
}

/// Which model shape to plan for.
#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Experiment config supplying `model`/`preset` and `layers`.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Implementation of the targeted matrices.
    #[arg(long, value_enum, default_value_t = KindArg::Dense)]
    pub layer_kind: KindArg,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// Targeted matrices (default: every per-layer matrix).
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<MatrixName>,
    /// Training method (default follows the layer kind).
    #[arg(long)]
    pub method: Option<Method>,
    /// Price the exact parameter count instead of the headline one.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Bytes per parameter for the storage column.
    #[arg(long, default_value_t = 2.0)]
    pub bytes_per_param: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanMemArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    /// Sequence length (default: the model's context).
    #[arg(long)]
    pub seq: Option<u64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::StoreAll)]
    pub policy: PolicyArg,
    #[arg(long, default_value = "fp16")]
    pub precision: Precision,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanFlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seq: Option<u64>,
    /// Tokens to generate; switches to the inference workload.
    #[arg(long)]
    pub gen: Option<u64>,
    /// Prompt length for the inference workload.
    #[arg(long, default_value_t = 100)]
    pub l_in: u64,
    /// Parameter count for the inference workload (default: the model's).
    #[arg(long)]
    pub params: Option<f64>,
    #[arg(long)]
    pub kv_cache: bool,
    /// Hardware profile for time estimates (a100, phone).
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanPipelineArgs {
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub micro_batches: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub forward_cost: f64,
    #[arg(long, default_value_t = BACKWARD_FACTOR)]
    pub backward_cost: f64,
    /// Experiment config with a `pipeline` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanShardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub gpus: Option<u64>,
    /// Also plan optimizer offload, using activations for this batch.
    #[arg(long)]
    pub offload: bool,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long)]
    pub seq: Option<u64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::StoreAll)]
    pub policy: PolicyArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanFederatedArgs {
    /// Participants, center included.
    #[arg(long)]
    pub nodes: Option<u64>,
    /// Payload per transfer in GB.
    #[arg(long, conflicts_with = "payload_params")]
    pub model_gb: Option<f64>,
    /// Payload as a count of 16-bit values.
    #[arg(long)]
    pub payload_params: Option<f64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Link speed in MB/s (default: the a100 profile's).
    #[arg(long)]
    pub net_mbps: Option<f64>,
    /// Derive the payload from a model's trainable set instead.
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Loop sizes and optimizer settings; unset flags fall back to the
/// config's `train` section, then to defaults.
#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Training text (default: a built-in repetitive corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Stop once the mean loss of the last ten steps falls below the
    /// corpus unigram entropy.
    #[arg(long)]
    pub stop_below_entropy: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model shape when no config is given.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// dense, method1 (low-rank from scratch) or method3 (blend).
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<MatrixName>,
    /// Dense checkpoint to blend away from (method3).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Initial blend weight on the dense path (method3).
    #[arg(long, default_value_t = 1.0)]
    pub alpha_start: f64,
    /// Step at which the blend weight reaches 0 (default: half the steps).
    #[arg(long)]
    pub alpha_end_step: Option<u64>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub save: SaveArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SaveArgs {
    /// Output checkpoint (default: `model.lrlm` in the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FloatFormat::F32)]
    pub dtype: FloatFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<MatrixName>,
    /// Worker threads (default: LRLM_THREADS or the core count).
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub save: SaveArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Adapted matrices (default: wq,wv).
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<MatrixName>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub save: SaveArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<MatrixName>,
    #[command(flatten)]
    pub save: SaveArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dequantize quantized adapter bases before merging.
    #[arg(long)]
    pub dequantize: bool,
    #[command(flatten)]
    pub save: SaveArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 32)]
    pub gen: usize,
    /// Re-run the whole prefix every step instead of caching keys and
    /// values.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Check this checkpoint instead of a small random model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Layer implementation of the random model: dense, lowrank, lora or
    /// blend.
    #[arg(long, default_value = "dense")]
    pub kind: String,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Probed entries per tensor (0 probes all).
    #[arg(long, default_value_t = 8)]
    pub per_tensor: usize,
}
