//! `linesight`: data generation, two-stage training, evaluation and chat.

mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use linesight_core::config::RunConfig;

/// Bad invocation: a missing flag, file or unknown value. Exits with 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Debug, Parser)]
#[command(
    name = "linesight",
    version,
    about = "Vision-language assistant for power line inspection"
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Configuration override, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic inspection world (images, annotations, templates,
    /// caption pairs and MCQ items).
    Synth(SynthArgs),
    /// Synthesize instruction data through a chat backend.
    GenerateData(GenerateArgs),
    /// Stage 1: train the projector on single-turn caption pairs.
    Pretrain(PretrainArgs),
    /// Stage 2: instruction-tune projector and language model.
    Finetune(FinetuneArgs),
    /// Score a model on multiple-choice items.
    Eval(EvalArgs),
    /// Interactive session with a trained model.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Renderings of every scene.
    #[arg(long)]
    pub variants: Option<u32>,
    /// Number of MCQ items.
    #[arg(long)]
    pub mcq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// `stub` or `http`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Per-type targets as DETAILED,CONVERSATION,COMPLEX.
    #[arg(long, value_name = "D,C,X")]
    pub targets: Option<String>,
    /// Fraction of stub replies that are malformed.
    #[arg(long)]
    pub malformed_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Caption-pair dataset (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional general-domain pairs mixed in.
    #[arg(long)]
    pub general: Option<PathBuf>,
    /// Directory that image references are resolved against.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Stage-1 checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Instruction dataset (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Drop every sample of this type.
    #[arg(long, value_name = "TYPE")]
    pub ablate: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// MCQ items (JSONL).
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// `model`, `oracle`, `text-oracle` or `constant:TEXT`.
    #[arg(long)]
    pub runner: Option<String>,
    /// Exit with 1 when accuracy falls below this value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
}

/// Config file, then `--set` overrides, then `--seed`.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(usage(format!("--config: no such file: {}", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    cfg.apply_overrides(&cli.overrides).map_err(|e| usage(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Synth(a) => commands::synth(&mut cfg, out, a),
        Command::GenerateData(a) => commands::generate_data(&mut cfg, out, a),
        Command::Pretrain(a) => commands::pretrain(&mut cfg, out, a),
        Command::Finetune(a) => commands::finetune(&mut cfg, out, a),
        Command::Eval(a) => commands::eval(&mut cfg, out, a),
        Command::Chat(a) => commands::chat(&mut cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
