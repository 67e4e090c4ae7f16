//! `reconstruct-preview`: run the reconstruction branch of a full
//! checkpoint over dataset images and write (input | masked | recon)
//! triptych PNGs.

use std::path::PathBuf;

use clap::Args;
use ssad_core::checkpoint::load_checkpoint;
use ssad_core::image::ImageBuffer;
use ssad_core::mask::{apply_mask, generate_mask, MaskFill};
use ssad_core::render::write_triptych;
use ssad_core::trainer::derive_seed;
use ssad_core::SsadModelF32;

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::{load_dataset, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Full (unstripped) training checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory supplying the input images.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for the triptych PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images to preview (taken in dataset order).
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Override the mask-sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML config (only hashed into the manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &PreviewArgs) -> CmdResult {
    let fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = SsadModelF32::from_checkpoint(&ck)?;
    let config = &ck.config;
    let seed = args.seed.unwrap_or(config.seed);

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "reconstruct-preview",
        args.config.as_deref(),
        config_hash(&fc)?,
        seed,
        &args.out,
    );

    let dataset = load_dataset(&args.dataset, config.image_size, config.patch_size)?;
    let grid = config.image_size / config.patch_size;
    let n = args.count.min(dataset.len());
    for i in 0..n {
        let img = &dataset.images[i];
        let mask = generate_mask(
            grid,
            grid,
            config.patch_size,
            config.mask_rate,
            derive_seed(seed, &format!("preview/{i}")),
        )
        .map_err(anyhow::Error::from)?;
        let masked = apply_mask(img, &mask, MaskFill::Zero).map_err(anyhow::Error::from)?;
        let features = model
            .encoder
            .encode(&model.store, &masked)
            .map_err(anyhow::Error::from)?;
        let recon: ImageBuffer<f32> = model
            .decoder
            .decode(&model.store, &features, config.image_size)
            .map_err(anyhow::Error::from)?;
        let path = args
            .out
            .join(format!("preview_{:05}.png", dataset.records[i].image_id));
        write_triptych(img, &masked, &recon, &path).map_err(anyhow::Error::from)?;
        println!("wrote {}", path.display());
    }
    println!("{n} triptychs in {}", args.out.display());
    manifest.finish()?;
    Ok(())
}
