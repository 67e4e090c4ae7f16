//! `train`: run one training paradigm over a dataset directory.

use std::path::PathBuf;

use clap::Args;
use ssad_core::trainer::{train, Paradigm};

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::{load_dataset, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; the [train] section applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (COCO layout, as produced by `synth`).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run output directory (checkpoint, logs, timing).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the training paradigm: ssad, detection_only, ssl_then_ft.
    #[arg(long)]
    pub paradigm: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &TrainArgs) -> CmdResult {
    let mut fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    if let Some(seed) = args.seed {
        fc.train.seed = seed;
    }
    if let Some(p) = &args.paradigm {
        fc.train.paradigm = p
            .parse::<Paradigm>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    fc.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "train",
        args.config.as_deref(),
        config_hash(&fc)?,
        fc.train.seed,
        &args.out,
    );

    let dataset = load_dataset(&args.dataset, fc.train.image_size, fc.train.patch_size)?;
    println!(
        "training {} on {} images ({} categories), {} epochs",
        fc.train.paradigm.as_str(),
        dataset.len(),
        dataset.categories.len(),
        fc.train.epochs
    );
    let outcome = train(&dataset, &fc.train, &args.out)?;
    for phase in &outcome.phases {
        println!(
            "  phase {}: {} epochs in {:.1}s -> {}",
            phase.label,
            phase.epochs,
            phase.seconds,
            phase.checkpoint.display()
        );
    }
    println!(
        "done in {:.1}s; final checkpoint {}",
        outcome.total_seconds,
        outcome.final_checkpoint.display()
    );
    manifest.finish()?;
    Ok(())
}
