//! `synth`: generate the toy texture dataset in COCO layout.

use std::path::PathBuf;

use clap::Args;
use ssad_core::synth::{synthesize_with, write_toy_dataset};

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::{CliError, CmdResult};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML config; the [synth] section applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty directory / take over a stale lock.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &SynthArgs) -> CmdResult {
    let mut fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    if let Some(seed) = args.seed {
        fc.synth.seed = seed;
    }

    if !args.force && args.out.is_dir() {
        let occupied = std::fs::read_dir(&args.out)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if occupied {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "synth",
        args.config.as_deref(),
        config_hash(&fc)?,
        fc.synth.seed,
        &args.out,
    );

    let (images, records) = synthesize_with::<f32>(&fc.synth)?;
    write_toy_dataset(&args.out, &images, &records, fc.synth.n_categories)?;
    println!(
        "wrote {} images ({}x{}, {} categories) to {}",
        images.len(),
        fc.synth.image_size,
        fc.synth.image_size,
        fc.synth.n_categories,
        args.out.display()
    );
    manifest.finish()?;
    Ok(())
}
