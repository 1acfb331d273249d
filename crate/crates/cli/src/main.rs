//! `rubikssl`: dataset generation, permutation banks, proxy pretraining,
//! downstream finetuning, evaluation, and multi-seed strategy comparisons.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! runtime failures (I/O, malformed files, training errors).

mod commands;
mod run;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rubikssl_core::config::resolve_config;
use rubikssl_core::trainer::TrainConfig;
use rubikssl_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rubikssl", version, about = "Self-supervised 3D pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset with masks and split manifests
    GenSynth(GenSynthArgs),
    /// Build a permutation bank by greedy Hamming-distance selection
    Permbank(PermbankArgs),
    /// Pretrain the encoder on the cube-recovery proxy task
    Pretrain(PretrainArgs),
    /// Train a downstream task, optionally from a pretrained checkpoint
    Finetune(FinetuneArgs),
    /// Evaluate a finetuned checkpoint on a test manifest
    Eval(EvalArgs),
    /// Run pretraining strategies against a scratch baseline over seeds
    Compare(CompareArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Cls,
    Seg,
}

impl Task {
    fn phase_key(self) -> &'static str {
        match self {
            Task::Cls => "finetune_cls",
            Task::Seg => "finetune_seg",
        }
    }
}

/// Configuration source flags shared by the training commands. Precedence:
/// defaults, then --config file, then --set overrides, then the dedicated
/// flags (--seed, --deterministic, task/init flags).
#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long)]
    seed: Option<u64>,
    /// Pin wall-clock fields and timestamps for byte-identical reruns
    #[arg(long)]
    deterministic: bool,
    /// Print the resolved configuration and exit without running
    #[arg(long)]
    dry_run: bool,
}

impl ConfigArgs {
    fn overrides(&self, extra: &[(String, String)]) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got '{s}'"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if self.deterministic {
            pairs.push(("deterministic".into(), "true".into()));
        }
        pairs.extend_from_slice(extra);
        Ok(pairs)
    }

    fn resolve(&self, extra: &[(String, String)]) -> Result<TrainConfig> {
        resolve_config(self.config.as_deref(), &self.overrides(extra)?)
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of volumes
    #[arg(long)]
    n: usize,
    /// Volume dimensions as CxXxYxZ
    #[arg(long, default_value = "1x64x64x64")]
    dims: String,
    /// Number of distinct classes
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train fraction of the train/test split
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PermbankArgs {
    /// Cubes per volume (bank permutation length)
    #[arg(long)]
    m: usize,
    /// Bank size
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Select from a random pool instead of the full permutation space
    /// (required once M exceeds the enumerable range)
    #[arg(long)]
    sampled: bool,
    /// Pool size for --sampled
    #[arg(long)]
    pool_size: Option<usize>,
    /// Output bank file (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training split manifest
    #[arg(long)]
    train: PathBuf,
    /// Test split manifest
    #[arg(long)]
    test: PathBuf,
    /// Permutation bank file
    #[arg(long)]
    bank: PathBuf,
    /// Run directory (must not already hold a run)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Pretrained checkpoint to transfer the encoder from
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: Task,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test split manifest
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Permutation bank (needed by arms that pretrain)
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Config file for the pretraining stage of pretraining arms
    #[arg(long)]
    pretrain_config: Option<PathBuf>,
    /// Config file for the downstream stage of every arm
    #[arg(long)]
    finetune_config: Option<PathBuf>,
    /// Comma-separated arms: scratch, full, ordering_only, orientation_only
    #[arg(long, default_value = "scratch,full")]
    arms: String,
    /// Comma-separated seeds, one run per arm per seed
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Permbank(a) => commands::permbank(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
