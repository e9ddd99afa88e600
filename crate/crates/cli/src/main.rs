//! `ammc`: generate synthetic data, train, evaluate and replay ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use ammc::data::Split;
use ammc::ErrorClass;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "ammc", version, about = "Multimodal combiner training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic suite as one dataset file per task.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Suite configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the per-task training split size.
        #[arg(long)]
        train_size: Option<usize>,
    },
    /// Train on the datasets in a directory, or resume an interrupted run.
    Train {
        /// Run configuration (TOML). Required unless resuming.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Directory holding `<task>.jsonl` files.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, metrics log and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint left by an interrupted run.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Stop before this optimizer step, leaving a resumable checkpoint.
        #[arg(long)]
        halt_after: Option<u64>,
    },
    /// Evaluate a checkpoint on every task: metrics, transfer matrix, gate reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
    },
    /// Run the configured ablations and write one table per ablation.
    Ablate {
        /// Ablation configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print what a checkpoint holds.
    InspectCheckpoint {
        path: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { out, config, seed, train_size } => {
            commands::gen_data(&out, config.as_deref(), seed, train_size)
        }
        Command::Train { config, data, out, resume, halt_after } => {
            commands::train(config.as_deref(), &data, &out, resume.as_deref(), halt_after)
        }
        Command::Eval { checkpoint, data, out, split } => commands::eval(&checkpoint, &data, &out, split.into()),
        Command::Ablate { config, out } => commands::ablate(config.as_deref(), &out),
        Command::InspectCheckpoint { path, json } => commands::inspect(&path, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 3,
                ErrorClass::Data => 4,
                ErrorClass::Numeric => 5,
            })
        }
    }
}
