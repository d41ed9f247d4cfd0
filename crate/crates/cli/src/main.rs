//! `tsv`: merge, compress and inspect fine-tuned checkpoints with task singular vectors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use tsv_core::tensor::Dtype;
use tsv_core::RankPolicy;

#[derive(Parser, Debug)]
#[command(
    name = "tsv",
    version,
    about = "Task singular vector merging and compression"
)]
pub struct Cli {
    /// Worker threads (defaults to available parallelism)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Merge fine-tuned checkpoints into the pre-trained one
    Merge(MergeArgs),
    /// Store one task delta as truncated singular factors
    Compress(CompressArgs),
    /// Rebuild a checkpoint from compressed factors
    Expand(ExpandArgs),
    /// Per-layer singular task interference across fine-tuned checkpoints
    Interference(InterferenceArgs),
    /// Run the numerical checks on random orthogonal bases
    Verify(VerifyArgs),
    /// List the tensors of a checkpoint or compressed task file
    Info(InfoArgs),
}

/// Rank selection. At most one may be given.
#[derive(Args, Debug, Clone, Default)]
#[command(group(ArgGroup::new("rank_policy").multiple(false)))]
pub struct RankArgs {
    /// Keep floor(f · min(d, m)) components per layer
    #[arg(long, value_name = "F", group = "rank_policy")]
    pub rank_fraction: Option<f64>,
    /// Keep floor(min(d, m) / T) components per layer
    #[arg(long, value_name = "T", alias = "tasks", group = "rank_policy")]
    pub rank_per_task: Option<usize>,
    /// Keep exactly K components per layer
    #[arg(long, value_name = "K", group = "rank_policy")]
    pub rank: Option<usize>,
    /// No truncation
    #[arg(long, group = "rank_policy")]
    pub full_rank: bool,
}

impl RankArgs {
    pub fn policy(&self) -> Option<RankPolicy> {
        if let Some(f) = self.rank_fraction {
            Some(RankPolicy::Fraction(f))
        } else if let Some(t) = self.rank_per_task {
            Some(RankPolicy::PerTask(t))
        } else if let Some(k) = self.rank {
            Some(RankPolicy::Explicit(k))
        } else if self.full_rank {
            Some(RankPolicy::Full)
        } else {
            None
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoArg {
    Procrustes,
    Eigen,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormArg {
    Entrywise,
    Induced,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtypeArg {
    F32,
    F16,
    Bf16,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
            DtypeArg::Bf16 => Dtype::BF16,
        }
    }
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Pre-trained checkpoint
    #[arg(long)]
    pub pre: PathBuf,
    /// Fine-tuned checkpoints, one per task
    #[arg(long, num_args = 1.., required = true)]
    pub ft: Vec<PathBuf>,
    /// Merged checkpoint; with --ablation, the stem for the four outputs
    #[arg(long)]
    pub out: PathBuf,
    /// Scale of the merged task component
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub rank: RankArgs,
    /// Skip per-task truncation
    #[arg(long, conflicts_with = "ablation")]
    pub no_low_rank: bool,
    /// Skip orthogonalization of the concatenated bases
    #[arg(long, conflicts_with = "ablation")]
    pub no_ortho: bool,
    #[arg(long, value_enum, default_value = "procrustes")]
    pub ortho_method: OrthoArg,
    /// Eigenvalue floor for --ortho-method eigen
    #[arg(long, default_value_t = 1e-12)]
    pub eps: f64,
    #[arg(long, value_enum, default_value = "entrywise")]
    pub norm: NormArg,
    /// Write all four toggle combinations (<out>.{ta,lr,ir,tsvm}.<ext>) and a comparison report
    #[arg(long)]
    pub ablation: bool,
    /// Treat this matrix layer as a vector layer (repeatable)
    #[arg(long, value_name = "LAYER")]
    pub force_vector: Vec<String>,
    #[arg(long, value_enum, default_value = "f32")]
    pub out_dtype: DtypeArg,
    /// Merge report JSON (default: <out>.report.json)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub pre: PathBuf,
    /// Fine-tuned checkpoint of the task to compress
    #[arg(long)]
    pub ft: PathBuf,
    /// Compressed task file
    #[arg(long)]
    pub out: PathBuf,
    /// Rank selection; defaults to --rank-per-task 8
    #[command(flatten)]
    pub rank: RankArgs,
    /// Task id stored in the file (default: the fine-tuned file stem)
    #[arg(long)]
    pub task_id: Option<String>,
    #[arg(long, value_name = "LAYER")]
    pub force_vector: Vec<String>,
    /// Storage report JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExpandArgs {
    /// Compressed task file
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "f32")]
    pub out_dtype: DtypeArg,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterferenceArgs {
    #[arg(long)]
    pub pre: PathBuf,
    /// Fine-tuned checkpoints, at least two
    #[arg(long, num_args = 1.., required = true)]
    pub ft: Vec<PathBuf>,
    /// Rank selection; defaults to --rank-per-task <number of tasks>
    #[command(flatten)]
    pub rank: RankArgs,
    #[arg(long, value_enum, default_value = "entrywise")]
    pub norm: NormArg,
    /// Also sum layers per transformer block
    #[arg(long)]
    pub group_blocks: bool,
    #[arg(long, value_name = "LAYER")]
    pub force_vector: Vec<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    /// Orthogonalization error of truncated vs full concatenations
    Bound,
    /// Same measurement with rectangular blocks (reported, never fails)
    Rectangular,
    /// Procrustes vs eigen-whitening
    Whitening,
    All,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub check: Check,
    /// Block size
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Number of blocks
    #[arg(long, default_value_t = 9)]
    pub tasks: usize,
    /// Retained columns per block
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Orthonormal columns per block in the rectangular check
    #[arg(long, default_value_t = 4)]
    pub columns: usize,
    /// Matrix heights cycled through by the whitening check
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 32, 128])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    /// Checkpoint or compressed task file
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
