//! `deepsd`: synthetic data, training, inference, baselines, evaluation and
//! benchmarking for stacked CNN precipitation downscaling.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Failure;

#[derive(Parser, Debug)]
#[command(name = "deepsd", version, about = "Stacked super-resolution CNN downscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options accepted by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the serial reference mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a terrain raster and an elevation-coupled daily precipitation series.
    Synth(commands::SynthArgs),
    /// Area-average a raster or series onto a coarser grid.
    Coarsen(commands::CoarsenArgs),
    /// Train one or more stacked super-resolution levels.
    Train(commands::TrainArgs),
    /// Downscale a low-resolution series through a trained stack.
    Infer(commands::InferArgs),
    /// Fit and/or apply the BCSD baseline.
    Bcsd(commands::BcsdArgs),
    /// Fit and apply the per-location lasso baseline.
    Asd(commands::AsdArgs),
    /// Score a predicted series against observations.
    Evaluate(commands::EvaluateArgs),
    /// Time stacked inference over a series, level by level.
    Benchmark(commands::BenchmarkArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("deepsd: usage: {line}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Coarsen(a) => commands::coarsen(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bcsd(a) => commands::bcsd(a),
        Command::Asd(a) => commands::asd(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let text = f.to_string().replace('\n', " ");
    eprintln!("deepsd: {text}");
    ExitCode::from(f.exit_code() as u8)
}
