//! `coattn`: generate data, train, evaluate, localize, fine-tune, check
//! gradients and sweep ablations.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "coattn", version, about = "Co-attention audio-visual synchronization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted override, e.g. `model.attention.heads=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic synchronization (or action) dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generate the 4-class action set instead of sync pairs.
        #[arg(long)]
        action: bool,
    },
    /// Train on synchronization labels; writes a checkpoint and report.
    TrainPretext(Common),
    /// Print synchronization accuracy of a checkpoint on a dataset.
    EvalSync(Common),
    /// Write CAM and per-head attention heatmaps.
    Localize(Common),
    /// Fine-tune a classifier on the synthetic action set.
    Finetune(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
    /// Train every (depth, heads) combination and write a CSV table.
    Ablate(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { common, action } => commands::run(&common, |ctx| commands::gen_data(ctx, action)),
        Command::TrainPretext(c) => commands::run(&c, commands::train_pretext),
        Command::EvalSync(c) => commands::run(&c, commands::eval_sync),
        Command::Localize(c) => commands::run(&c, commands::localize),
        Command::Finetune(c) => commands::run(&c, commands::finetune),
        Command::Gradcheck(c) => commands::run(&c, commands::gradcheck),
        Command::Ablate(c) => commands::run(&c, commands::ablate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
