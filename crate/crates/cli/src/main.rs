//! `ssad` — dataset synthesis, joint detection + masked-reconstruction
//! training, evaluation and visualization in one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ssad",
    version,
    about = "Joint detection + self-supervised reconstruction training framework"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic texture dataset (COCO layout).
    Synth(commands::synth::SynthArgs),
    /// Train under a paradigm: ssad, detection_only or ssl_then_ft.
    Train(commands::train::TrainArgs),
    /// Score a checkpoint or a COCO-results file against a dataset.
    Eval(commands::eval::EvalArgs),
    /// Train all paradigms plus the no-TC ablation and tabulate them.
    CompareParadigms(commands::compare::CompareArgs),
    /// Benchmark every registered texture extractor.
    BenchExtractors(commands::bench::BenchArgs),
    /// Write (input | masked | reconstruction) triptychs.
    ReconstructPreview(commands::preview::PreviewArgs),
    /// Draw labeled detection boxes onto images.
    Overlay(commands::overlay::OverlayArgs),
}

fn dispatch(cli: &Cli) -> commands::CmdResult {
    match &cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::CompareParadigms(args) => commands::compare::run(args),
        Command::BenchExtractors(args) => commands::bench::run(args),
        Command::ReconstructPreview(args) => commands::preview::run(args),
        Command::Overlay(args) => commands::overlay::run(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are successful terminations.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
