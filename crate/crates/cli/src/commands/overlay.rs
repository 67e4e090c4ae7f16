//! `overlay`: draw labeled detection boxes (and optional ground truth)
//! onto images, one annotated PNG per input.

use std::path::{Path, PathBuf};

use clap::Args;
use ssad_core::checkpoint::load_checkpoint;
use ssad_core::coco::image_path;
use ssad_core::image::{read_image, write_png};
use ssad_core::render::render_overlay;
use ssad_core::InferenceModelF32;

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::{detect_in_native_frame, load_annotations, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Checkpoint (full or stripped).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory: annotate its images and draw ground truth.
    #[arg(long, conflicts_with = "images")]
    pub dataset: Option<PathBuf>,
    /// Individual image files to annotate (no ground truth).
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Output directory for annotated PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// Only draw detections at or above this score.
    #[arg(long)]
    pub score_threshold: Option<f64>,
    /// Skip ground-truth boxes in dataset mode.
    #[arg(long)]
    pub no_gt: bool,
    /// Annotate at most this many dataset images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// TOML config (only hashed into the manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

fn out_name(out: &Path, source: &Path) -> PathBuf {
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    out.join(format!("overlay_{stem}.png"))
}

pub fn run(args: &OverlayArgs) -> CmdResult {
    if args.dataset.is_none() && args.images.is_empty() {
        return Err(CliError::usage(
            "overlay needs inputs: --dataset <dir> or --images <files>",
        ));
    }
    let fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = InferenceModelF32::from_checkpoint(&ck)?;
    let score_threshold = args.score_threshold.unwrap_or(ck.config.score_threshold);
    let names = model.categories.names.clone();

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "overlay",
        args.config.as_deref(),
        config_hash(&fc)?,
        0,
        &args.out,
    );

    let mut written = 0usize;
    if let Some(dir) = &args.dataset {
        let annotations = load_annotations(dir)?;
        let limit = args.limit.unwrap_or(annotations.records.len());
        for record in annotations.records.iter().take(limit) {
            let src = image_path(dir, &record.file_name);
            let native = read_image::<f32>(&src)?;
            let dets =
                detect_in_native_frame(&model, &native, score_threshold, ck.config.nms_iou)?;
            let gt = (!args.no_gt).then_some(record.boxes.as_slice());
            let annotated = render_overlay(&native, &dets, gt, &names);
            let dst = out_name(&args.out, Path::new(&record.file_name));
            write_png(&annotated, &dst)?;
            written += 1;
        }
    } else {
        for src in &args.images {
            let native = read_image::<f32>(src)?;
            let dets =
                detect_in_native_frame(&model, &native, score_threshold, ck.config.nms_iou)?;
            let annotated = render_overlay(&native, &dets, None, &names);
            write_png(&annotated, &out_name(&args.out, src))?;
            written += 1;
        }
    }

    println!("annotated {written} images into {}", args.out.display());
    manifest.finish()?;
    Ok(())
}
