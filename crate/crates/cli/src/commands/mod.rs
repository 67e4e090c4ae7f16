//! Subcommand implementations plus the error split that drives the
//! process exit code: usage errors (1) versus runtime failures (2).

pub mod bench;
pub mod compare;
pub mod eval;
pub mod overlay;
pub mod preview;
pub mod synth;
pub mod train;

use std::path::Path;

use ssad_core::coco::{annotation_path, load_coco_annotations, LoadedAnnotations, TaskKind};
use ssad_core::detect::Detection;
use ssad_core::coco::GroundTruthBox;
use ssad_core::image::resize_bilinear;
use ssad_core::trainer::Dataset;
use ssad_core::{ImageBufferF32, InferenceModelF32};

/// Command failure, split by who has to fix it.
#[derive(Debug)]
pub enum CliError {
    /// The invocation itself is wrong (flags, config values, bad combos).
    Usage(String),
    /// The invocation was fine but the work failed.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), CliError>;

/// All toy datasets are N-category enumerations.
pub const DATASET_TASK: TaskKind = TaskKind::Enumeration;

pub fn load_dataset(dir: &Path, image_size: usize, patch_size: usize) -> anyhow::Result<Dataset<f32>> {
    Dataset::load(dir, DATASET_TASK, image_size, patch_size)
        .map_err(|e| anyhow::anyhow!("loading dataset {}: {e}", dir.display()))
}

pub fn load_annotations(dir: &Path) -> anyhow::Result<LoadedAnnotations> {
    load_coco_annotations(&annotation_path(dir), DATASET_TASK)
        .map_err(|e| anyhow::anyhow!("loading annotations in {}: {e}", dir.display()))
}

/// Detect on an image of arbitrary native size: resize to the model's
/// frame, run detection, then map boxes back to native coordinates.
pub fn detect_in_native_frame(
    model: &InferenceModelF32,
    native: &ImageBufferF32,
    det_score_threshold: f64,
    nms_iou: f64,
) -> anyhow::Result<Vec<Detection>> {
    let s = model.image_size;
    let resized = if native.height == s && native.width == s {
        native.clone()
    } else {
        resize_bilinear(native, s, s)
    };
    let dets = model
        .detect(&resized, det_score_threshold, nms_iou)
        .map_err(anyhow::Error::from)?;
    let sx = native.width as f64 / s as f64;
    let sy = native.height as f64 / s as f64;
    dets.into_iter()
        .map(|d| {
            let b = &d.bbox;
            Ok(Detection {
                bbox: GroundTruthBox::new(
                    b.x_min * sx,
                    b.y_min * sy,
                    b.x_max * sx,
                    b.y_max * sy,
                    b.category_id,
                )?,
                score: d.score,
            })
        })
        .collect()
}

/// Deterministic pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}
