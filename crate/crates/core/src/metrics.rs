//! Detection metrics: IoU matching, COCO-style average precision, and
//! image-level confusion summaries. `paper_auc` is an accuracy-style
//! ratio, (TP+TN)/(TP+FN+FP+TN); the name flags that it is not ROC-AUC.
//!
//! TN is ill-defined box-wise, so confusion counts are taken at image
//! level per category: an image is positive when any ground-truth box of
//! the category exists, predicted positive when any detection clears the
//! score threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coco::{AnnotationRecord, GroundTruthBox};
use crate::detect::Detection;

/// Intersection-over-union of two boxes (category ignored).
pub fn iou(a: &GroundTruthBox, b: &GroundTruthBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy score-order matching for one image.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `(detection index, matched ground-truth index)` in score order.
    pub pairs: Vec<(usize, Option<usize>)>,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

/// Match predictions to ground truth at one IoU threshold. Predictions
/// are visited in descending score order; each claims the unmatched
/// same-category ground truth of highest IoU at or above the threshold.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    iou_thr: f64,
) -> MatchResult {
    // Defensive sort: callers usually pass score-ordered predictions.
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::with_capacity(preds.len());
    let mut tp = 0;
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.category_id != p.category_id() {
                continue;
            }
            let v = iou(&p.bbox, g);
            if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                tp += 1;
                pairs.push((pi, Some(gi)));
            }
            None => pairs.push((pi, None)),
        }
    }
    MatchResult {
        pairs,
        tp,
        fp: preds.len() - tp,
        missed: gts.len() - tp,
    }
}

/// Detections and ground truth for one image, already restricted to one
/// dataset split.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Pair annotation records with per-image detections (missing images get
/// empty detection lists).
pub fn image_evals(
    records: &[AnnotationRecord],
    detections: &BTreeMap<u64, Vec<Detection>>,
) -> Vec<ImageEval> {
    records
        .iter()
        .map(|r| ImageEval {
            detections: detections.get(&r.image_id).cloned().unwrap_or_default(),
            ground_truth: r.boxes.clone(),
        })
        .collect()
}

/// Average precision from `(score, is_tp)` flags and the ground-truth
/// count, using the all-points precision-envelope interpolation.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = sorted.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Monotone envelope from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Raw precision/recall walk for one category at one IoU threshold, in
/// descending score order — the curve `average_precision` integrates.
/// Returns `(recall, precision)` pairs, empty when the category has no
/// ground truth.
pub fn pr_points(evals: &[ImageEval], category: usize, iou_thr: f64) -> Vec<(f64, f64)> {
    let (flags, n_gt) = category_flags(evals, category, iou_thr);
    if n_gt == 0 {
        return Vec::new();
    }
    let mut sorted = flags;
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push((0.0, 1.0));
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    points
}

/// TP/FP flags for one category at one IoU threshold: per-image greedy
/// matching, flags pooled across the dataset.
fn category_flags(evals: &[ImageEval], category: usize, iou_thr: f64) -> (Vec<(f64, bool)>, usize) {
    let mut flags = Vec::new();
    let mut n_gt = 0;
    for ev in evals {
        let preds: Vec<Detection> = ev
            .detections
            .iter()
            .filter(|d| d.category_id() == category)
            .cloned()
            .collect();
        let gts: Vec<GroundTruthBox> = ev
            .ground_truth
            .iter()
            .filter(|g| g.category_id == category)
            .cloned()
            .collect();
        n_gt += gts.len();
        let m = match_detections(&preds, &gts, iou_thr);
        for &(pi, gi) in &m.pairs {
            flags.push((preds[pi].score, gi.is_some()));
        }
    }
    (flags, n_gt)
}

/// Image-level confusion counts for one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_count + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_count += other.fn_count;
        self.tn += other.tn;
    }
}

/// An image is positive for a category when any ground-truth box of that
/// category exists; predicted positive when any detection of the category
/// reaches `score_threshold`.
pub fn confusion_counts(
    evals: &[ImageEval],
    category: usize,
    score_threshold: f64,
) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for ev in evals {
        let actual = ev.ground_truth.iter().any(|g| g.category_id == category);
        let predicted = ev
            .detections
            .iter()
            .any(|d| d.category_id() == category && d.score >= score_threshold);
        match (actual, predicted) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_count += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

///`(paper_auc, specificity)` from raw counts; `None` on an empty
/// denominator. paper_auc = (TP+TN)/(TP+FN+FP+TN), specificity =
/// TN/(TN+FP).
pub fn auc_and_specificity(counts: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let total = counts.total();
    let auc = if total > 0 {
        Some((counts.tp + counts.tn) as f64 / total as f64)
    } else {
        None
    };
    let denom = counts.tn + counts.fp;
    let spec = if denom > 0 {
        Some(counts.tn as f64 / denom as f64)
    } else {
        None
    };
    (auc, spec)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category_id: usize,
    pub name: Option<String>,
    pub n_ground_truth: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    pub counts: ConfusionCounts,
}

/// Full metric suite over a dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    /// Accuracy-style ratio (TP+TN)/total, micro-aggregated over
    /// categories; absent when no images were evaluated.
    pub paper_auc: Option<f64>,
    pub specificity: Option<f64>,
    pub score_threshold: f64,
    pub n_images: usize,
    pub per_category: Vec<CategoryMetrics>,
}

/// Compute AP50/AP75/AP50:95 plus image-level paper_auc and specificity.
/// Categories without ground truth are excluded from the AP means.
pub fn map_suite(
    evals: &[ImageEval],
    n_categories: usize,
    category_names: Option<&[String]>,
    score_threshold: f64,
) -> MetricReport {
    let thresholds = coco_thresholds();
    let mut per_category = Vec::new();
    let mut micro = ConfusionCounts::default();
    let mut mean_ap50 = 0.0;
    let mut mean_ap75 = 0.0;
    let mut mean_all = 0.0;
    let mut n_with_gt = 0usize;

    for cat in 0..n_categories {
        let counts = confusion_counts(evals, cat, score_threshold);
        micro.add(&counts);
        let (_, n_gt) = category_flags(evals, cat, 0.5);
        if n_gt == 0 {
            continue;
        }
        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            let (flags, n) = category_flags(evals, cat, thr);
            aps.push(average_precision(&flags, n));
        }
        let ap50 = aps[0];
        let ap75 = aps[5];
        let ap50_95 = aps.iter().sum::<f64>() / aps.len() as f64;
        mean_ap50 += ap50;
        mean_ap75 += ap75;
        mean_all += ap50_95;
        n_with_gt += 1;
        per_category.push(CategoryMetrics {
            category_id: cat,
            name: category_names.and_then(|n| n.get(cat).cloned()),
            n_ground_truth: n_gt,
            ap50,
            ap75,
            ap50_95,
            counts,
        });
    }

    let scale = if n_with_gt > 0 { 1.0 / n_with_gt as f64 } else { 0.0 };
    let (paper_auc, specificity) = auc_and_specificity(&micro);
    MetricReport {
        ap50: mean_ap50 * scale,
        ap75: mean_ap75 * scale,
        ap50_95: mean_all * scale,
        paper_auc,
        specificity,
        score_threshold,
        n_images: evals.len(),
        per_category,
    }
}
