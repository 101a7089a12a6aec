//! Command-line pipeline: data generation and ingestion, pretraining,
//! downstream training, scoring, evaluation and reporting.

mod commands;
mod dataset;
pub mod plot;
mod run;

use std::path::PathBuf;

use cardio_core::CoreError;
use clap::{Args, Parser, Subcommand};

pub use dataset::DataDir;
pub use run::{replay_outputs, OutputRun};

/// Environment variable consulted when `--seed` is not given.
pub const SEED_ENV: &str = "CARDIO_ANOMALY_SEED";

#[derive(Debug, Parser)]
#[command(name = "cardio", version, about = "ECG restoration pretraining, anomaly scoring and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// TOML configuration file (run, benchmark or synthesis config depending
    /// on the command).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for preprocessing, scoring and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Seed override; falls back to CARDIO_ANOMALY_SEED, then the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize records from a generator spec, or a full benchmark.
    Generate(GenerateArgs),
    /// Filter records (native or WFDB format 16) into the native format.
    Preprocess(PreprocessArgs),
    /// Self-supervised pretraining on normal records.
    Pretrain(TrainArgs),
    /// Train the classifier head on a frozen pretrained backbone, or the
    /// whole network from scratch with `--scratch`.
    Finetune(FinetuneArgs),
    /// Train restoration and classification objectives together.
    JointTrain(JointArgs),
    /// Per-record score maps, anomaly scores and top-5 classes.
    Score(ScoreArgs),
    /// Detection, tier, localisation and stratified metric reports.
    Evaluate(EvaluateArgs),
    /// Metric reports per sex and age stratum with the AUROC gap.
    FairnessReport(FairnessArgs),
    /// Pretrain and evaluate the component ladder.
    Ablate(AblateArgs),
    /// Re-run a command from its manifest and compare output checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator spec for individual records.
    #[arg(long, conflicts_with = "benchmark")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10, conflicts_with = "benchmark")]
    pub count: usize,
    /// Write the full benchmark (records, split, schema); `--config` is
    /// read as a benchmark config.
    #[arg(long)]
    pub benchmark: bool,
    /// Multiply every benchmark partition size.
    #[arg(long, requires = "benchmark")]
    pub scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Benchmark directory or plain record directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long, required_unless_present = "scratch")]
    pub init: Option<PathBuf>,
    /// Train the whole network from random initialisation.
    #[arg(long, conflicts_with = "init")]
    pub scratch: bool,
}

#[derive(Debug, Args)]
pub struct JointArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one SVG plot per record.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Benchmark directory (test split) or plain record directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bootstrap replicates for the detection AUROC interval.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value = "sex,age")]
    pub by: String,
}

#[derive(Debug, Args)]
pub struct FairnessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sex,age")]
    pub by: String,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ladder order; stage k enables the first k components.
    #[arg(long, default_value = "mr,mc,tar,apm")]
    pub components: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error chain: 2 configuration, 3 data,
/// 4 numeric failure, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => 2,
                CoreError::Numeric(_) => 4,
                CoreError::Tensor(_) | CoreError::Contract(_) => 1,
                _ => 3,
            };
        }
    }
    1
}

pub fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    commands::dispatch(cli, argv)
}
