//! Detection branch: pluggable detector heads over the shared encoder,
//! center-cell target assignment, classification/regression losses and
//! decoded inference with per-category NMS.
//!
//! The head contract is deliberately small so alternative detectors can
//! slot in without touching the trainer: produce per-cell class logits
//! and edge offsets, and propagate gradients back to the feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coco::{AnnotationRecord, CategoryTable, CocoResult, GroundTruthBox};
use crate::encoder::{ConvEncoder, FeatureMap};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::iou;
use crate::nn::layers::{silu, silu_backward, Conv2d};
use crate::nn::{ParamId, ParamStore, Tensor3};
use crate::scalar::Scalar;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// One decoded detection; the box carries the category id.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: GroundTruthBox,
    pub score: f64,
}

impl Detection {
    pub fn category_id(&self) -> usize {
        self.bbox.category_id
    }
}

/// Raw per-cell head outputs: `cls_logits` is `[n_categories+1, gh, gw]`
/// (last channel = background), `reg` is `[4, gh, gw]` edge offsets
/// `[left, top, right, bottom]` in stride units.
#[derive(Debug, Clone)]
pub struct DetOutputs<T> {
    pub cls_logits: Tensor3<T>,
    pub reg: Tensor3<T>,
}

/// Detector head contract. Implementations register their parameters in
/// the shared store under names disjoint from the encoder's.
pub trait DetectorAdapter<T: Scalar> {
    fn name(&self) -> &str;
    fn n_categories(&self) -> usize;
    fn head_param_ids(&self) -> Vec<ParamId>;
    fn forward(&self, store: &ParamStore<T>, features: &FeatureMap<T>) -> DetOutputs<T>;
    /// Accumulate head-parameter gradients and return the feature-map
    /// gradient for the shared encoder.
    fn backward(
        &self,
        store: &mut ParamStore<T>,
        features: &FeatureMap<T>,
        grad_cls: &Tensor3<T>,
        grad_reg: &Tensor3<T>,
    ) -> Tensor3<T>;
}

/// Reference head: one 3x3 neck conv + SiLU, then 1x1 classification and
/// regression projections.
#[derive(Debug, Clone)]
pub struct ConvHead {
    neck: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    n_categories: usize,
}

impl ConvHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        feature_channels: usize,
        n_categories: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_categories == 0 {
            return Err(Error::config("detector.n_categories", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            neck: Conv2d::new(store, "det.neck", feature_channels, feature_channels, 3, 1, 1, &mut rng),
            cls: Conv2d::new(store, "det.cls", feature_channels, n_categories + 1, 1, 1, 0, &mut rng),
            reg: Conv2d::new(store, "det.reg", feature_channels, 4, 1, 1, 0, &mut rng),
            n_categories,
        })
    }
}

impl<T: Scalar> DetectorAdapter<T> for ConvHead {
    fn name(&self) -> &str {
        "conv"
    }

    fn n_categories(&self) -> usize {
        self.n_categories
    }

    fn head_param_ids(&self) -> Vec<ParamId> {
        [&self.neck, &self.cls, &self.reg]
            .iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    fn forward(&self, store: &ParamStore<T>, features: &FeatureMap<T>) -> DetOutputs<T> {
        let a = silu(&self.neck.forward(store, features));
        DetOutputs {
            cls_logits: self.cls.forward(store, &a),
            reg: self.reg.forward(store, &a),
        }
    }

    fn backward(
        &self,
        store: &mut ParamStore<T>,
        features: &FeatureMap<T>,
        grad_cls: &Tensor3<T>,
        grad_reg: &Tensor3<T>,
    ) -> Tensor3<T> {
        // Recompute the neck activation; cheaper than caching at 1/32 scale.
        let pre = self.neck.forward(store, features);
        let act = silu(&pre);
        let mut grad_act = self.cls.backward(store, &act, grad_cls);
        let g2 = self.reg.backward(store, &act, grad_reg);
        grad_act.add_assign(&g2);
        let grad_pre = silu_backward(&pre, &grad_act);
        self.neck.backward(store, features, &grad_pre)
    }
}

/// Minimal second adapter: bare 1x1 projections, no neck. Exists to prove
/// the head contract is genuinely pluggable.
#[derive(Debug, Clone)]
pub struct LinearHead {
    cls: Conv2d,
    reg: Conv2d,
    n_categories: usize,
}

impl LinearHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        feature_channels: usize,
        n_categories: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_categories == 0 {
            return Err(Error::config("detector.n_categories", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cls: Conv2d::new(store, "det.cls", feature_channels, n_categories + 1, 1, 1, 0, &mut rng),
            reg: Conv2d::new(store, "det.reg", feature_channels, 4, 1, 1, 0, &mut rng),
            n_categories,
        })
    }
}

impl<T: Scalar> DetectorAdapter<T> for LinearHead {
    fn name(&self) -> &str {
        "linear"
    }

    fn n_categories(&self) -> usize {
        self.n_categories
    }

    fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.cls.weight, self.cls.bias, self.reg.weight, self.reg.bias]
    }

    fn forward(&self, store: &ParamStore<T>, features: &FeatureMap<T>) -> DetOutputs<T> {
        DetOutputs {
            cls_logits: self.cls.forward(store, features),
            reg: self.reg.forward(store, features),
        }
    }

    fn backward(
        &self,
        store: &mut ParamStore<T>,
        features: &FeatureMap<T>,
        grad_cls: &Tensor3<T>,
        grad_reg: &Tensor3<T>,
    ) -> Tensor3<T> {
        let mut grad = self.cls.backward(store, features, grad_cls);
        let g2 = self.reg.backward(store, features, grad_reg);
        grad.add_assign(&g2);
        grad
    }
}

/// Known head kinds for the config surface.
pub fn detector_names() -> &'static [&'static str] {
    &["conv", "linear"]
}

pub fn create_detector<T: Scalar>(
    kind: &str,
    store: &mut ParamStore<T>,
    feature_channels: usize,
    n_categories: usize,
    seed: u64,
) -> Result<Box<dyn DetectorAdapter<T>>> {
    match kind {
        "conv" => Ok(Box::new(ConvHead::new(store, feature_channels, n_categories, seed)?)),
        "linear" => Ok(Box::new(LinearHead::new(store, feature_channels, n_categories, seed)?)),
        other => Err(Error::config(
            "detector.kind",
            format!("unknown detector `{other}` (available: {})", detector_names().join(", ")),
        )),
    }
}

/// Per-cell training targets. `labels[i] == n_categories` marks
/// background; `reg_targets` holds `[left, top, right, bottom]` distances
/// from the cell center to the box edges, in stride units, and is only
/// meaningful at positive cells.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub stride: usize,
    pub n_categories: usize,
    pub labels: Vec<usize>,
    pub reg_targets: Vec<[f64; 4]>,
}

impl TargetAssignment {
    pub fn background(&self) -> usize {
        self.n_categories
    }

    pub fn positive_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != self.n_categories)
            .map(|(i, _)| i)
    }
}

/// Assign each box to the cell containing its center; collisions go to
/// the smaller-area box. Distances to the four edges become regression
/// targets in stride units.
pub fn assign_targets(
    record: &AnnotationRecord,
    grid_rows: usize,
    grid_cols: usize,
    stride: usize,
    n_categories: usize,
) -> Result<TargetAssignment> {
    let n_cells = grid_rows * grid_cols;
    let mut labels = vec![n_categories; n_cells];
    let mut reg_targets = vec![[0.0; 4]; n_cells];
    let mut owner_area = vec![f64::INFINITY; n_cells];
    for b in &record.boxes {
        if b.category_id >= n_categories {
            return Err(Error::Annotation(format!(
                "box category {} out of range for {} categories",
                b.category_id, n_categories
            )));
        }
        let (cx, cy) = b.center();
        let j = ((cx / stride as f64) as usize).min(grid_cols - 1);
        let i = ((cy / stride as f64) as usize).min(grid_rows - 1);
        let cell = i * grid_cols + j;
        if b.area() >= owner_area[cell] {
            continue; // an equal-or-smaller box already owns this cell
        }
        owner_area[cell] = b.area();
        labels[cell] = b.category_id;
        let ccx = (j as f64 + 0.5) * stride as f64;
        let ccy = (i as f64 + 0.5) * stride as f64;
        let s = stride as f64;
        reg_targets[cell] = [
            (ccx - b.x_min) / s,
            (ccy - b.y_min) / s,
            (b.x_max - ccx) / s,
            (b.y_max - ccy) / s,
        ];
    }
    Ok(TargetAssignment {
        grid_rows,
        grid_cols,
        stride,
        n_categories,
        labels,
        reg_targets,
    })
}

fn check_shapes<T: Scalar>(outputs: &DetOutputs<T>, targets: &TargetAssignment) -> Result<()> {
    let (gh, gw) = (targets.grid_rows, targets.grid_cols);
    if outputs.cls_logits.height != gh
        || outputs.cls_logits.width != gw
        || outputs.cls_logits.channels != targets.n_categories + 1
        || outputs.reg.height != gh
        || outputs.reg.width != gw
        || outputs.reg.channels != 4
    {
        return Err(Error::Geometry(format!(
            "head outputs cls {}x{}x{} / reg {}x{}x{} inconsistent with {}x{} grid, {} categories",
            outputs.cls_logits.channels,
            outputs.cls_logits.height,
            outputs.cls_logits.width,
            outputs.reg.channels,
            outputs.reg.height,
            outputs.reg.width,
            gh,
            gw,
            targets.n_categories
        )));
    }
    Ok(())
}

/// Stable softmax over the channel axis at one cell.
fn cell_softmax<T: Scalar>(logits: &Tensor3<T>, y: usize, x: usize) -> Vec<T> {
    let c = logits.channels;
    let mut vals: Vec<T> = (0..c).map(|k| logits.get(k, y, x)).collect();
    let max = vals.iter().copied().fold(vals[0], T::max);
    let mut sum = T::zero();
    for v in &mut vals {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut vals {
        *v /= sum;
    }
    vals
}

/// Mean cross-entropy over all cells plus mean L1 over positive-cell
/// offsets. Returns `(cls, reg)`.
pub fn det_loss<T: Scalar>(outputs: &DetOutputs<T>, targets: &TargetAssignment) -> Result<(T, T)> {
    let (cls, reg, _, _) = det_loss_with_grads(outputs, targets)?;
    Ok((cls, reg))
}

/// Loss values together with gradients w.r.t. the raw head outputs.
#[allow(clippy::type_complexity)]
pub fn det_loss_with_grads<T: Scalar>(
    outputs: &DetOutputs<T>,
    targets: &TargetAssignment,
) -> Result<(T, T, Tensor3<T>, Tensor3<T>)> {
    check_shapes(outputs, targets)?;
    let (gh, gw) = (targets.grid_rows, targets.grid_cols);
    let n_cells = gh * gw;
    let inv_cells = T::from_f64_lossy(1.0 / n_cells as f64);

    let mut cls_loss = T::zero();
    let mut grad_cls = Tensor3::zeros(outputs.cls_logits.channels, gh, gw);
    for y in 0..gh {
        for x in 0..gw {
            let probs = cell_softmax(&outputs.cls_logits, y, x);
            let label = targets.labels[y * gw + x];
            cls_loss += -(probs[label].max(T::from_f64_lossy(f64::MIN_POSITIVE))).ln();
            for (k, &p) in probs.iter().enumerate() {
                let indicator = if k == label { T::one() } else { T::zero() };
                grad_cls.set(k, y, x, (p - indicator) * inv_cells);
            }
        }
    }
    cls_loss *= inv_cells;

    let positives: Vec<usize> = targets.positive_cells().collect();
    let mut reg_loss = T::zero();
    let mut grad_reg = Tensor3::zeros(4, gh, gw);
    if !positives.is_empty() {
        let inv = T::from_f64_lossy(1.0 / (4 * positives.len()) as f64);
        for &cell in &positives {
            let (y, x) = (cell / gw, cell % gw);
            for ch in 0..4 {
                let pred = outputs.reg.get(ch, y, x);
                let tgt = T::from_f64_lossy(targets.reg_targets[cell][ch]);
                let d = pred - tgt;
                reg_loss += d.abs() * inv;
                let sign = if d > T::zero() {
                    inv
                } else if d < T::zero() {
                    -inv
                } else {
                    T::zero()
                };
                grad_reg.set(ch, y, x, sign);
            }
        }
    }
    Ok((cls_loss, reg_loss, grad_cls, grad_reg))
}

/// Candidate boxes from raw head outputs: per-cell softmax, thresholding,
/// offset decoding, clamping to image bounds; degenerate boxes dropped.
pub fn decode_detections<T: Scalar>(
    outputs: &DetOutputs<T>,
    stride: usize,
    image_h: usize,
    image_w: usize,
    n_categories: usize,
    score_threshold: f64,
) -> Vec<Detection> {
    let (gh, gw) = (outputs.cls_logits.height, outputs.cls_logits.width);
    let s = stride as f64;
    let mut out = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let probs = cell_softmax(&outputs.cls_logits, y, x);
            let ccx = (x as f64 + 0.5) * s;
            let ccy = (y as f64 + 0.5) * s;
            #[allow(clippy::needless_range_loop)]
            for cat in 0..n_categories {
                let score = probs[cat].to_f64_lossy();
                if score < score_threshold {
                    continue;
                }
                let l = outputs.reg.get(0, y, x).to_f64_lossy();
                let t = outputs.reg.get(1, y, x).to_f64_lossy();
                let r = outputs.reg.get(2, y, x).to_f64_lossy();
                let b = outputs.reg.get(3, y, x).to_f64_lossy();
                let x_min = (ccx - l * s).clamp(0.0, image_w as f64);
                let y_min = (ccy - t * s).clamp(0.0, image_h as f64);
                let x_max = (ccx + r * s).clamp(0.0, image_w as f64);
                let y_max = (ccy + b * s).clamp(0.0, image_h as f64);
                if let Ok(bbox) = GroundTruthBox::new(x_min, y_min, x_max, y_max, cat) {
                    out.push(Detection { bbox, score });
                }
            }
        }
    }
    sort_by_score(&mut out);
    out
}

/// Deterministic descending-score order (ties broken by category, then
/// geometry).
fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.category_id().cmp(&b.category_id()))
            .then(a.bbox.y_min.partial_cmp(&b.bbox.y_min).unwrap())
            .then(a.bbox.x_min.partial_cmp(&b.bbox.x_min).unwrap())
    });
}

/// Greedy per-category non-maximum suppression; input order defines
/// priority (call with score-sorted candidates).
pub fn nms(candidates: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        let suppressed = kept.iter().any(|k| {
            k.category_id() == cand.category_id() && iou(&k.bbox, &cand.bbox) >= nms_iou
        });
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Full inference path: encode, head forward, decode, suppress.
pub fn detect<T: Scalar>(
    adapter: &dyn DetectorAdapter<T>,
    store: &ParamStore<T>,
    encoder: &ConvEncoder,
    img: &ImageBuffer<T>,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let features = encoder.encode(store, img)?;
    let outputs = adapter.forward(store, &features);
    let candidates = decode_detections(
        &outputs,
        encoder.stride,
        img.height,
        img.width,
        adapter.n_categories(),
        score_threshold,
    );
    Ok(nms(&candidates, nms_iou))
}

/// Convert detections to COCO-results rows (dense category ids).
pub fn to_coco_results(image_id: u64, dets: &[Detection]) -> Vec<CocoResult> {
    dets.iter()
        .map(|d| CocoResult {
            image_id,
            category_id: d.category_id(),
            bbox: [
                d.bbox.x_min,
                d.bbox.y_min,
                d.bbox.width(),
                d.bbox.height(),
            ],
            score: d.score,
        })
        .collect()
}

/// Rehydrate detections grouped per image id from COCO-results rows.
pub fn from_coco_results(rows: &[CocoResult]) -> Result<Vec<(u64, Vec<Detection>)>> {
    let mut by_image: std::collections::BTreeMap<u64, Vec<Detection>> = Default::default();
    for r in rows {
        let bbox = GroundTruthBox::new(
            r.bbox[0],
            r.bbox[1],
            r.bbox[0] + r.bbox[2],
            r.bbox[1] + r.bbox[3],
            r.category_id,
        )?;
        by_image
            .entry(r.image_id)
            .or_default()
            .push(Detection { bbox, score: r.score });
    }
    let mut out: Vec<(u64, Vec<Detection>)> = by_image.into_iter().collect();
    for (_, dets) in &mut out {
        sort_by_score(dets);
    }
    Ok(out)
}

/// Used by tests and docs: the raw-id mapped variant for foreign datasets.
pub fn to_coco_results_raw_ids(
    image_id: u64,
    dets: &[Detection],
    table: &CategoryTable,
) -> Result<Vec<CocoResult>> {
    dets.iter()
        .map(|d| {
            let raw = table
                .raw_ids
                .get(d.category_id())
                .copied()
                .ok_or_else(|| {
                    Error::Annotation(format!("category {} outside table", d.category_id()))
                })?;
            Ok(CocoResult {
                image_id,
                category_id: usize::try_from(raw).map_err(|_| {
                    Error::Annotation(format!("raw category id {raw} not representable"))
                })?,
                bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.width(), d.bbox.height()],
                score: d.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::TaskKind;
    use crate::encoder::EncoderConfig;
    use crate::nn::gradcheck::{compare_grads, finite_diff_grads, grads_by_name};
    use rand::Rng;

    fn record_with(boxes: Vec<GroundTruthBox>) -> AnnotationRecord {
        AnnotationRecord {
            image_id: 0,
            file_name: "img_0.png".into(),
            boxes,
            task: TaskKind::Disease,
        }
    }

    fn rand_outputs(n_categories: usize, gh: usize, gw: usize, seed: u64) -> DetOutputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = (0..(n_categories + 1) * gh * gw)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let reg = (0..4 * gh * gw).map(|_| rng.gen_range(-1.0..3.0)).collect();
        DetOutputs {
            cls_logits: Tensor3::from_vec(n_categories + 1, gh, gw, cls),
            reg: Tensor3::from_vec(4, gh, gw, reg),
        }
    }

    #[test]
    fn single_box_claims_its_center_cell() {
        let b = GroundTruthBox::new(130.0, 140.0, 160.0, 170.0, 1).unwrap();
        // center (145, 155) with stride 32 -> cell (4, 4)
        let rec = record_with(vec![b]);
        let t = assign_targets(&rec, 8, 8, 32, 3).unwrap();
        let positives: Vec<usize> = t.positive_cells().collect();
        assert_eq!(positives, vec![4 * 8 + 4]);
        assert_eq!(t.labels[4 * 8 + 4], 1);
        // cell center (144, 144): offsets (144-130, 144-140, 160-144, 170-144)/32
        let want = [14.0 / 32.0, 4.0 / 32.0, 16.0 / 32.0, 26.0 / 32.0];
        let got = t.reg_targets[4 * 8 + 4];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_record_is_all_background() {
        let t = assign_targets(&record_with(vec![]), 4, 4, 32, 3).unwrap();
        assert!(t.labels.iter().all(|&l| l == 3));
        assert_eq!(t.positive_cells().count(), 0);
    }

    #[test]
    fn center_collision_goes_to_smaller_area() {
        // Both centered at (48, 48) -> cell (1, 1); areas 100 and 400.
        let small = GroundTruthBox::new(43.0, 43.0, 53.0, 53.0, 0).unwrap();
        let large = GroundTruthBox::new(38.0, 38.0, 58.0, 58.0, 2).unwrap();
        for order in [vec![small, large], vec![large, small]] {
            let t = assign_targets(&record_with(order), 4, 4, 32, 3).unwrap();
            assert_eq!(t.labels[4 + 1], 0, "smaller box must win the cell");
            assert_eq!(t.positive_cells().count(), 1);
        }
    }

    #[test]
    fn uniform_logits_cost_ln_c_plus_1() {
        let n_cat = 3;
        let outputs = DetOutputs {
            cls_logits: Tensor3::from_vec(4, 2, 2, vec![0.7f64; 16]),
            reg: Tensor3::zeros(4, 2, 2),
        };
        let t = assign_targets(&record_with(vec![]), 2, 2, 32, n_cat).unwrap();
        let (cls, reg) = det_loss(&outputs, &t).unwrap();
        assert!((cls - (4.0f64).ln()).abs() < 1e-12);
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn saturated_correct_logits_drive_cls_to_zero() {
        let n_cat = 2;
        let mut logits = Tensor3::zeros(3, 2, 2);
        let labels = [0usize, 1, 2, 2];
        for (cell, &l) in labels.iter().enumerate() {
            logits.set(l, cell / 2, cell % 2, 50.0f64);
        }
        let mut t = assign_targets(&record_with(vec![]), 2, 2, 32, n_cat).unwrap();
        t.labels = labels.to_vec();
        let outputs = DetOutputs { cls_logits: logits, reg: Tensor3::zeros(4, 2, 2) };
        let (cls, _) = det_loss(&outputs, &t).unwrap();
        assert!(cls < 1e-12, "cls = {cls}");
    }

    #[test]
    fn exact_offsets_zero_regression() {
        let b = GroundTruthBox::new(10.0, 20.0, 50.0, 60.0, 0).unwrap();
        let t = assign_targets(&record_with(vec![b]), 2, 2, 32, 1).unwrap();
        let cell = t.positive_cells().next().unwrap();
        let mut reg = Tensor3::zeros(4, 2, 2);
        for ch in 0..4 {
            reg.set(ch, cell / 2, cell % 2, t.reg_targets[cell][ch]);
        }
        let outputs = DetOutputs { cls_logits: Tensor3::zeros(2, 2, 2), reg };
        let (_, reg_loss) = det_loss(&outputs, &t).unwrap();
        assert_eq!(reg_loss, 0.0);
    }

    #[test]
    fn det_loss_matches_bruteforce_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for trial in 0..100 {
            let n_cat = rng.gen_range(1..5);
            let (gh, gw) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let outputs = rand_outputs(n_cat, gh, gw, 100 + trial);
            let mut t = TargetAssignment {
                grid_rows: gh,
                grid_cols: gw,
                stride: 32,
                n_categories: n_cat,
                labels: (0..gh * gw).map(|_| rng.gen_range(0..=n_cat)).collect(),
                reg_targets: (0..gh * gw)
                    .map(|_| [0.0; 4].map(|_| rng.gen_range(0.0..2.0)))
                    .collect(),
            };
            // Clear targets at background cells, as assign_targets would.
            for (cell, &l) in t.labels.clone().iter().enumerate() {
                if l == n_cat {
                    t.reg_targets[cell] = [0.0; 4];
                }
            }
            let (cls, reg) = det_loss(&outputs, &t).unwrap();

            // Brute force: explicit softmax + log per cell.
            let mut want_cls = 0.0;
            for y in 0..gh {
                for x in 0..gw {
                    let logits: Vec<f64> =
                        (0..=n_cat).map(|k| outputs.cls_logits.get(k, y, x)).collect();
                    let z: f64 = logits.iter().map(|v| v.exp()).sum();
                    let p = logits[t.labels[y * gw + x]].exp() / z;
                    want_cls += -p.ln();
                }
            }
            want_cls /= (gh * gw) as f64;
            assert!((cls - want_cls).abs() <= 1e-6 * (1.0 + want_cls.abs()));

            let positives: Vec<usize> =
                t.labels.iter().enumerate().filter(|(_, &l)| l != n_cat).map(|(i, _)| i).collect();
            let mut want_reg = 0.0;
            for &cell in &positives {
                for ch in 0..4 {
                    want_reg +=
                        (outputs.reg.get(ch, cell / gw, cell % gw) - t.reg_targets[cell][ch]).abs();
                }
            }
            if !positives.is_empty() {
                want_reg /= (4 * positives.len()) as f64;
            }
            assert!((reg - want_reg).abs() <= 1e-6 * (1.0 + want_reg.abs()));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_through_heads() {
        let mut store = ParamStore::<f64>::new();
        let cfg = EncoderConfig { width: 8, seed: 60, ..EncoderConfig::default() };
        let enc = ConvEncoder::new(&mut store, &cfg).unwrap();
        let head = ConvHead::new(&mut store, 8, 2, 61).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let img = ImageBuffer::<f64>::from_fn(1, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
        let b1 = GroundTruthBox::new(5.0, 5.0, 30.0, 30.0, 0).unwrap();
        let b2 = GroundTruthBox::new(33.0, 40.0, 60.0, 62.0, 1).unwrap();
        let targets = assign_targets(&record_with(vec![b1, b2]), 2, 2, 32, 2).unwrap();

        let loss = |store: &ParamStore<f64>| {
            let f = enc.encode(store, &img).unwrap();
            let out = DetectorAdapter::<f64>::forward(&head, store, &f);
            let (cls, reg) = det_loss(&out, &targets).unwrap();
            cls + reg
        };

        store.zero_grads();
        let acts = enc.forward_cached(&store, &img).unwrap();
        let out = DetectorAdapter::<f64>::forward(&head, &store, &acts.output);
        let (_, _, grad_cls, grad_reg) = det_loss_with_grads(&out, &targets).unwrap();
        let grad_features =
            DetectorAdapter::<f64>::backward(&head, &mut store, &acts.output, &grad_cls, &grad_reg);
        enc.backward(&mut store, &acts, &grad_features);

        let mut ids = enc.param_ids();
        ids.extend(DetectorAdapter::<f64>::head_param_ids(&head));
        let analytic = grads_by_name(&store, &ids);
        let numeric = finite_diff_grads(&mut store, &ids, 1e-6, loss);
        let report = compare_grads(&analytic, &numeric, 1e-3, 1e-7);
        assert!(
            report.passed(),
            "{} mismatches, first: {:?}",
            report.mismatches.len(),
            report.mismatches.first()
        );
    }

    #[test]
    fn threshold_one_yields_nothing() {
        let mut store = ParamStore::<f32>::new();
        let enc = ConvEncoder::new(&mut store, &EncoderConfig::default()).unwrap();
        let head = ConvHead::new(&mut store, 64, 3, 7).unwrap();
        let img = ImageBuffer::<f32>::zeros(1, 64, 64);
        let dets = detect(&head, &store, &enc, &img, 1.0, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn zero_offsets_decode_to_nothing() {
        // Strongly positive class logit but all offsets zero: the decoded
        // box collapses to the cell center and is rejected.
        let mut cls = Tensor3::zeros(2, 2, 2);
        cls.set(0, 0, 0, 10.0f64);
        let outputs = DetOutputs { cls_logits: cls, reg: Tensor3::zeros(4, 2, 2) };
        let dets = decode_detections(&outputs, 32, 64, 64, 1, 0.5);
        assert!(dets.is_empty());
    }

    #[test]
    fn decode_matches_hand_geometry() {
        let mut cls = Tensor3::zeros(2, 2, 2);
        cls.set(0, 1, 1, 10.0f64);
        let mut reg = Tensor3::zeros(4, 2, 2);
        // cell (1,1): center (48, 48); offsets l=0.5, t=0.25, r=0.5, b=0.75 (x32)
        reg.set(0, 1, 1, 0.5);
        reg.set(1, 1, 1, 0.25);
        reg.set(2, 1, 1, 0.5);
        reg.set(3, 1, 1, 0.75);
        let outputs = DetOutputs { cls_logits: cls, reg };
        let dets = decode_detections(&outputs, 32, 64, 64, 1, 0.5);
        assert_eq!(dets.len(), 1);
        let b = &dets[0].bbox;
        assert!((b.x_min - 32.0).abs() < 1e-9);
        assert!((b.y_min - 40.0).abs() < 1e-9);
        assert!((b.x_max - 64.0).abs() < 1e-9);
        assert!((b.y_max - 64.0).abs() < 1e-9);
        assert!(dets[0].score > 0.99);
    }

    #[test]
    fn nms_collapses_identical_boxes() {
        let b = GroundTruthBox::new(10.0, 10.0, 20.0, 20.0, 0).unwrap();
        let cands = vec![
            Detection { bbox: b, score: 0.9 },
            Detection { bbox: b, score: 0.8 },
        ];
        let kept = nms(&cands, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_cross_category_overlaps() {
        let a = GroundTruthBox::new(10.0, 10.0, 20.0, 20.0, 0).unwrap();
        let b = GroundTruthBox::new(10.0, 10.0, 20.0, 20.0, 1).unwrap();
        let kept = nms(
            &[Detection { bbox: a, score: 0.9 }, Detection { bbox: b, score: 0.8 }],
            0.5,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_survivors_have_low_pairwise_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut cands = Vec::new();
        for _ in 0..60 {
            let x = rng.gen_range(0.0..80.0);
            let y = rng.gen_range(0.0..80.0);
            let w = rng.gen_range(5.0..30.0);
            let h = rng.gen_range(5.0..30.0);
            let cat = rng.gen_range(0..2);
            cands.push(Detection {
                bbox: GroundTruthBox::new(x, y, x + w, y + h, cat).unwrap(),
                score: rng.gen_range(0.1..1.0),
            });
        }
        sort_by_score(&mut cands);
        let kept = nms(&cands, 0.5);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].category_id() == kept[j].category_id() {
                    assert!(iou(&kept[i].bbox, &kept[j].bbox) < 0.5);
                }
            }
        }
    }

    #[test]
    fn linear_head_satisfies_the_same_contract() {
        let mut store = ParamStore::<f64>::new();
        let cfg = EncoderConfig { width: 8, seed: 80, ..EncoderConfig::default() };
        let enc = ConvEncoder::new(&mut store, &cfg).unwrap();
        let head: Box<dyn DetectorAdapter<f64>> =
            create_detector("linear", &mut store, 8, 3, 81).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let img = ImageBuffer::<f64>::from_fn(1, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
        let dets = detect(head.as_ref(), &store, &enc, &img, 0.05, 0.5).unwrap();
        for d in &dets {
            assert!(d.score >= 0.05 && d.score <= 1.0);
        }
    }

    #[test]
    fn coco_results_roundtrip() {
        let b = GroundTruthBox::new(10.0, 20.0, 40.0, 60.0, 2).unwrap();
        let rows = to_coco_results(7, &[Detection { bbox: b, score: 0.5 }]);
        assert_eq!(rows[0].bbox, [10.0, 20.0, 30.0, 40.0]);
        let back = from_coco_results(&rows).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, 7);
        assert_eq!(back[0].1[0].bbox, b);
    }
}
