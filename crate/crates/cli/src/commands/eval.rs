//! `eval`: score detections against a dataset. Two sources: run a
//! checkpoint over the images, or score a COCO-results JSON directly.
//! All coordinates in results and reports live in the annotation frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use ssad_core::checkpoint::load_checkpoint;
use ssad_core::coco::{image_path, read_results, CocoResult};
use ssad_core::detect::{from_coco_results, to_coco_results, Detection};
use ssad_core::image::read_image;
use ssad_core::metrics::{image_evals, map_suite, pr_points, ImageEval, MetricReport};
use ssad_core::render::pr_curve_svg;
use ssad_core::InferenceModelF32;

use crate::config::{config_hash, load_config, EvalOverrides};
use crate::manifest::{LockGuard, RunManifest};

use super::{detect_in_native_frame, load_annotations, write_json, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to run over the dataset images.
    #[arg(long, conflicts_with = "results")]
    pub checkpoint: Option<PathBuf>,
    /// Pre-computed COCO-results JSON to score instead.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Dataset directory providing images + ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for report.json (+ results.json, pr_curves/).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config; the [eval] section applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write one PR-curve SVG per category (IoU 0.5).
    #[arg(long)]
    pub pr_curves: bool,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

/// Thresholds with the checkpoint (or stock) defaults filled in.
struct Resolved {
    det_score_threshold: f64,
    nms_iou: f64,
    score_threshold: f64,
}

fn resolve(overrides: &EvalOverrides, from_checkpoint: Option<&ssad_core::trainer::TrainConfig>) -> Resolved {
    let base = from_checkpoint.cloned().unwrap_or_default();
    Resolved {
        det_score_threshold: overrides.det_score_threshold.unwrap_or(base.det_score_threshold),
        nms_iou: overrides.nms_iou.unwrap_or(base.nms_iou),
        score_threshold: overrides.score_threshold.unwrap_or(base.score_threshold),
    }
}

pub fn run(args: &EvalArgs) -> CmdResult {
    if args.checkpoint.is_none() && args.results.is_none() {
        return Err(CliError::usage(
            "eval needs a detection source: --checkpoint <file> or --results <file>",
        ));
    }
    let fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "eval",
        args.config.as_deref(),
        config_hash(&fc)?,
        0,
        &args.out,
    );

    let annotations = load_annotations(&args.dataset)?;
    let n_categories = annotations.categories.len();

    let (evals, report) = if let Some(ck_path) = &args.checkpoint {
        let ck = load_checkpoint(ck_path)?;
        let model = InferenceModelF32::from_checkpoint(&ck)?;
        let thr = resolve(&fc.eval, Some(&ck.config));
        let mut by_id: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        let mut rows: Vec<CocoResult> = Vec::new();
        for record in &annotations.records {
            let native = read_image::<f32>(&image_path(&args.dataset, &record.file_name))?;
            let dets =
                detect_in_native_frame(&model, &native, thr.det_score_threshold, thr.nms_iou)?;
            rows.extend(to_coco_results(record.image_id, &dets));
            by_id.insert(record.image_id, dets);
        }
        ssad_core::coco::write_results(&rows, &args.out.join("results.json"))?;
        let evals = image_evals(&annotations.records, &by_id);
        let report = map_suite(
            &evals,
            n_categories,
            Some(&annotations.categories.names),
            thr.score_threshold,
        );
        (evals, report)
    } else {
        let thr = resolve(&fc.eval, None);
        let rows = read_results(args.results.as_ref().unwrap())?;
        let by_id: BTreeMap<u64, Vec<Detection>> =
            from_coco_results(&rows)?.into_iter().collect();
        let evals = image_evals(&annotations.records, &by_id);
        let report = map_suite(
            &evals,
            n_categories,
            Some(&annotations.categories.names),
            thr.score_threshold,
        );
        (evals, report)
    };

    write_json(&report, &args.out.join("report.json"))?;
    if args.pr_curves {
        write_pr_curves(&evals, &report, &args.out.join("pr_curves"))?;
    }
    print_report(&report);
    manifest.finish()?;
    Ok(())
}

fn write_pr_curves(evals: &[ImageEval], report: &MetricReport, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for cat in &report.per_category {
        if cat.n_ground_truth == 0 {
            continue;
        }
        let points = pr_points(evals, cat.category_id, 0.5);
        let name = cat
            .name
            .clone()
            .unwrap_or_else(|| format!("category_{}", cat.category_id));
        let svg = pr_curve_svg(&points, &format!("{name} AP50 {:.3}", cat.ap50));
        std::fs::write(dir.join(format!("{name}_ap50.svg")), svg)?;
    }
    Ok(())
}

fn print_report(report: &MetricReport) {
    println!(
        "AP50 {:.4}  AP75 {:.4}  AP50:95 {:.4}  ({} images)",
        report.ap50, report.ap75, report.ap50_95, report.n_images
    );
    match (report.paper_auc, report.specificity) {
        (Some(auc), Some(spec)) => println!(
            "paper_auc {auc:.4}  specificity {spec:.4}  @score>={:.2}",
            report.score_threshold
        ),
        _ => println!("paper_auc/specificity undefined on this split"),
    }
    for cat in &report.per_category {
        println!(
            "  {:<14} gt {:>4}  AP50 {:.4}  AP75 {:.4}  AP50:95 {:.4}",
            cat.name.clone().unwrap_or_else(|| cat.category_id.to_string()),
            cat.n_ground_truth,
            cat.ap50,
            cat.ap75,
            cat.ap50_95
        );
    }
}
