//! `rmm`: build the toy zoo, merge, search, enumerate and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmm_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rmm",
    version,
    about = "Layer-wise model merging searched by reinforcement learning"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Rebuild outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Config override, `dotted.key=value` (repeatable).
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tasks, the pretrained model and one fine-tuned model per task.
    TrainTasks,
    /// Merge with one operator at every layer, or with an explicit plan.
    Merge {
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        method: Option<String>,
        /// JSON merge plan, e.g. `[{"layer":1,"action":"model:1"}, ...]`.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the PPO search.
    Search,
    /// Enumerate and score every emit-only plan.
    Oracle,
    /// Report per-task accuracy of a checkpoint (default: every source model).
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DivergedTraining(_) | Error::NonFiniteLoss | Error::NonFiniteLogits => 2,
            Error::ArchMismatch(..)
            | Error::DimensionBreak(..)
            | Error::IllegalAction(_)
            | Error::EmptyPlan
            | Error::ShapeMismatch(_) => 3,
            Error::SpaceTooLarge(..) => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = g.out {
        cfg.out_dir = out;
    }
    let threads = g
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", cfg.out_dir.display())))?;

    match cli.command {
        Command::TrainTasks => commands::train_tasks(&cfg, g.force),
        Command::Merge { method, plan } => commands::merge(&cfg, method.as_deref(), plan.as_deref()),
        Command::Search => commands::search(&cfg),
        Command::Oracle => commands::oracle(&cfg),
        Command::Eval { model } => commands::eval(&cfg, model.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
