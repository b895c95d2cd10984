//! `treevocab`: synthetic data, pre-training, fine-tuning and
//! transferability reports from the command line.
//!
//! Exit codes: 0 on success, 1 when the input is invalid (detected before
//! any compute where possible), 2 when a run fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treevocab_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "treevocab", version, about = "Tree-vocabulary graph pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic graph (g1, g2, g3 or a labeled block model) as JSON.
    Synth(SynthFlags),
    /// Pre-train on the configured graphs; writes a checkpoint and loss curve.
    Pretrain {
        #[command(flatten)]
        run: RunFlags,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint on given splits or task instances.
    Finetune {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Fine-tune a checkpoint on k labeled nodes per class.
    Fewshot {
        #[command(flatten)]
        run: RunFlags,
        /// Override the number of shots per class.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pairwise graph similarity matrix as CSV.
    Kernel {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Synthetic transferability experiment.
    Transfer {
        #[command(flatten)]
        run: RunFlags,
        /// Override the number of repetitions per cell.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Token usage and codebook statistics of a checkpoint.
    InspectVocab(InspectFlags),
}

#[derive(Args)]
struct RunFlags {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<RunFlags> for commands::RunArgs {
    fn from(f: RunFlags) -> Self {
        Self {
            config: f.config,
            seed: f.seed,
            out: f.out,
        }
    }
}

#[derive(Args)]
struct SynthFlags {
    /// g1, g2, g3 or labeled.
    #[arg(long)]
    family: String,
    /// Number of blocks (g1, g2, g3).
    #[arg(long)]
    blocks: Option<usize>,
    /// Node feature width (4 for block families, 8 for labeled by default).
    #[arg(long)]
    dim: Option<usize>,
    /// Number of classes (labeled).
    #[arg(long)]
    classes: Option<usize>,
    /// Nodes per class (labeled).
    #[arg(long)]
    nodes_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectFlags {
    /// JSON configuration with `checkpoint` and `graphs`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Graph to embed; repeat for several.
    #[arg(long = "graph")]
    graphs: Vec<PathBuf>,
    /// Directory for a JSON copy of the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(f) => commands::synth(commands::SynthArgs {
            family: f.family,
            blocks: f.blocks,
            dim: f.dim,
            classes: f.classes,
            nodes_per_class: f.nodes_per_class,
            seed: f.seed,
            out: f.out,
        }),
        Command::Pretrain { run, epochs } => commands::pretrain(run.into(), epochs),
        Command::Finetune { run } => commands::finetune(run.into()),
        Command::Fewshot { run, k } => commands::fewshot(run.into(), k),
        Command::Kernel { run } => commands::kernel(run.into()),
        Command::Transfer { run, seeds } => commands::transfer(run.into(), seeds),
        Command::InspectVocab(f) => commands::inspect_vocab(commands::InspectArgs {
            config: f.config,
            checkpoint: f.checkpoint,
            graphs: f.graphs,
            out: f.out,
        }),
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        if cause.is::<config::Invalid>() {
            return true;
        }
        matches!(
            cause.downcast_ref::<CoreError>(),
            Some(
                CoreError::Precondition(_)
                    | CoreError::Parse { .. }
                    | CoreError::InvalidGraph { .. }
                    | CoreError::Shape(_)
                    | CoreError::CheckpointVersion { .. }
                    | CoreError::CorruptCheckpoint(_)
                    | CoreError::CheckpointShape { .. }
            )
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
