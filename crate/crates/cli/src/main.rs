//! `mga`: runs the pipeline stages on a run directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error or missing
//! upstream artifact, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mga_core::config::ExperimentConfig;
use mga_core::pipeline::{self, Run};
use mga_core::CoreError;

#[derive(Parser)]
#[command(name = "mga", version, about = "Missingness-aware multimodal alignment and timeline modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory receiving all artifacts.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Config override, e.g. `--set pretrain.batch_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic cohort.
    Synth,
    /// Stratified train/val/test split.
    Split,
    /// Alignment pretraining of the encoder bank.
    Pretrain,
    /// Retrieval and silhouette of the pretrained latent space.
    LatentEval,
    /// Fine-tune contrastive and scratch decoders.
    Finetune,
    /// Test-split task metrics.
    TaskEval,
    /// Attention traces and modality ablation.
    Interpret,
    /// Pretraining sweep over simulated modality missingness.
    Sweep,
    /// synth, split, pretrain, latent-eval, finetune, task-eval and interpret.
    All,
}

fn exit_code(err: &CoreError) -> u8 {
    use mga_nn::NnError;
    match err {
        CoreError::Config(_) => 2,
        CoreError::Numeric(_) => 4,
        CoreError::Nn(NnError::NonFinite { .. } | NnError::NonFiniteObjective { .. }) => 4,
        CoreError::Nn(NnError::Config(_)) => 2,
        _ => 3,
    }
}

fn run_stage(run: &Run, command: Command) -> mga_core::Result<()> {
    match command {
        Command::Synth => pipeline::synth(run).map(drop),
        Command::Split => pipeline::split(run).map(drop),
        Command::Pretrain => pipeline::pretrain(run).map(drop),
        Command::LatentEval => pipeline::latent_eval(run).map(drop),
        Command::Finetune => pipeline::finetune(run),
        Command::TaskEval => pipeline::task_eval(run).map(drop),
        Command::Interpret => pipeline::interpret(run).map(drop),
        Command::Sweep => pipeline::sweep(run).map(drop),
        Command::All => [
            Command::Synth,
            Command::Split,
            Command::Pretrain,
            Command::LatentEval,
            Command::Finetune,
            Command::TaskEval,
            Command::Interpret,
        ]
        .into_iter()
        .try_for_each(|c| run_stage(run, c)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &cli.overrides),
        None => ExperimentConfig::from_toml("", &cli.overrides),
    };
    let result = config
        .and_then(|cfg| Run::open(&cli.run_dir, cfg))
        .and_then(|run| run_stage(&run, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
