//! `hpfold`: train, evaluate, and exhaustively certify 3D cubic-lattice HP
//! folds.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use hpfold::cli;

#[derive(Parser)]
#[command(
    name = "hpfold",
    about = "3D cubic-lattice HP protein folding: deep Q-learning and exact enumeration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent on a sequence described by a config file.
    Train {
        /// Flat key=value config file (# comments allowed).
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for logs, curve data, and checkpoints.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the episode budget.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override the sequence (plain or repetition notation).
        #[arg(long)]
        sequence: Option<String>,
        /// Override with a benchmark id (1-7).
        #[arg(long)]
        benchmark: Option<u8>,
    },
    /// Greedy evaluation of a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence to fold (defaults to the one stored in the checkpoint).
        #[arg(long)]
        sequence: Option<String>,
        /// Benchmark id (1-7) instead of an explicit sequence.
        #[arg(long)]
        benchmark: Option<u8>,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Where to write the resulting conformation (stdout otherwise).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exhaustively certify the optimal energy of a short sequence.
    Enumerate {
        #[arg(long)]
        sequence: Option<String>,
        /// Benchmark id (1-7) instead of an explicit sequence.
        #[arg(long)]
        benchmark: Option<u8>,
        /// Admissible-bound pruning (identical result either way).
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set,
              num_args = 0..=1, default_missing_value = "true")]
        prune: bool,
        /// Partition the top-level branches across threads.
        #[arg(long)]
        parallel: bool,
        /// Where to write the witness conformation (stdout otherwise).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Validate and pretty-print an exported conformation record.
    Export {
        /// A best.json / optimal-*.json conformation record.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the validated record (stdout otherwise).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
            episodes,
            sequence,
            benchmark,
        } => cli::cmd_train(cli::TrainArgs {
            config,
            seed,
            out_dir,
            episodes,
            sequence,
            benchmark,
        }),
        Command::Evaluate {
            checkpoint,
            sequence,
            benchmark,
            episodes,
            out_dir,
        } => cli::cmd_evaluate(cli::EvaluateArgs {
            checkpoint,
            sequence,
            benchmark,
            episodes,
            out_dir,
        }),
        Command::Enumerate {
            sequence,
            benchmark,
            prune,
            parallel,
            out_dir,
        } => cli::cmd_enumerate(cli::EnumerateArgs {
            sequence,
            benchmark,
            prune,
            parallel,
            out_dir,
        }),
        Command::Export { input, out_dir } => cli::cmd_export(cli::ExportArgs { input, out_dir }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
