//! `affordance`: dataset generation, two-stage training, evaluation and
//! single-cloud prediction.

use std::path::PathBuf;
use std::process::ExitCode;

use affordance_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

mod commands;
mod config;
mod manifest;

#[derive(Parser, Debug)]
#[command(
    name = "affordance",
    version,
    about = "Instruction-driven point cloud affordance segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Rops,
    Iras,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArg {
    WoPc,
    WoUl,
    DiceOnly,
    BceOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Close,
    Open,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub task: TaskArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Step/epoch log, JSON lines. Defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Directory holding `rops.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Directory holding `iras.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint to transfer the backbone and decoder from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablation: Vec<AblationArg>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "close")]
    pub split: SplitArg,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Prediction records, JSON lines. Defaults to `<out>.predictions.jsonl`.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Binary cloud file as written by gen-data.
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub ask: String,
    /// Writes one byte (0 or 1) per point.
    #[arg(long)]
    pub dump_mask: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Report JSON from `eval`, or a prediction dump to recompute from.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RerunArgs {
    /// A `*.run.json` written next to an artifact.
    pub manifest: PathBuf,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the ROPS and/or IRAS datasets.
    GenData {
        #[command(flatten)]
        args: GenDataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: referring part segmentation.
    Pretrain {
        #[command(flatten)]
        args: PretrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: instruction reasoning affordance segmentation.
    Finetune {
        #[command(flatten)]
        args: FinetuneArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Predict every sample of a split and score it.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Segment one cloud for one instruction.
    Predict {
        #[command(flatten)]
        args: PredictArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Print a report table.
    Report {
        #[command(flatten)]
        args: ReportArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved config as TOML.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Replay a run from its manifest and check the artifacts match.
    Rerun {
        #[command(flatten)]
        args: RerunArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Report { .. } => "report",
            Command::ShowConfig { .. } => "show-config",
            Command::Rerun { .. } => "rerun",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Catalog(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Checkpoint(_) | Error::VocabMismatch { .. } | Error::Transfer { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
