//! Joint training orchestration: one shared encoder, a reconstruction
//! branch and a detection branch trained simultaneously, plus the
//! detection-only and pretrain-then-finetune baselines for paradigm
//! comparison.
//!
//! Determinism contract: everything flows from `config.seed` through
//! separate derived RNG streams (parameter init, epoch shuffling, mask
//! sampling, augmentation), so any two runs with the same config produce
//! bit-identical parameter trajectories and logs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimSnapshot, RngSnapshot};
use crate::coco::{annotation_path, image_path, AnnotationRecord, CategoryTable, TaskKind};
use crate::detect::{
    assign_targets, create_detector, det_loss_with_grads, detect, Detection, DetectorAdapter,
};
use crate::encoder::{ConvEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::{horizontal_flip, read_image, resize_with_boxes, ImageBuffer};
use crate::mask::{apply_mask, generate_mask, MaskFill, MaskSpec};
use crate::metrics::{image_evals, map_suite, MetricReport};
use crate::nn::{lr_at_epoch, AdamW, ParamStore, Sgd};
use crate::recon::{recon_loss, recon_loss_backward, ReconDecoder};
use crate::scalar::Scalar;
use crate::texture::{
    create_extractor, tc_loss_backward, tc_loss_with, FrozenExtractor, GatherNormalization,
};

/// Training paradigm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Joint one-stage training of both branches (the framework's mode).
    #[default]
    Ssad,
    /// Supervised detection alone.
    DetectionOnly,
    /// Two-stage baseline: self-supervised pretraining, then detection
    /// fine-tuning from the pretrained encoder.
    SslThenFt,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Ssad => "ssad",
            Paradigm::DetectionOnly => "detection_only",
            Paradigm::SslThenFt => "ssl_then_ft",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssad" => Ok(Paradigm::Ssad),
            "detection_only" => Ok(Paradigm::DetectionOnly),
            "ssl_then_ft" => Ok(Paradigm::SslThenFt),
            other => Err(Error::config(
                "paradigm",
                format!("unknown paradigm `{other}` (ssad, detection_only, ssl_then_ft)"),
            )),
        }
    }
}

/// Full training configuration. All fields have defaults; the config file
/// may override any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub image_size: usize,
    pub patch_size: usize,
    /// Loss weights applied to the total objective.
    pub w_recon: f64,
    pub w_tc: f64,
    pub w_cls: f64,
    pub w_reg: f64,
    /// AdamW rate for the encoder + detection heads.
    pub lr_det: f64,
    /// SGD rate for the reconstruction decoder.
    pub lr_recon: f64,
    /// Epochs (1-indexed) at whose start the rates drop by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub paradigm: Paradigm,
    /// Encoder width (final channel count; must be a multiple of 4).
    pub encoder_width: usize,
    /// Detector head kind: `conv` or `linear`.
    pub detector: String,
    /// Frozen extractor name for the texture-consistency loss.
    pub extractor: String,
    /// Pretraining epochs for `ssl_then_ft`; `None` means three times
    /// `epochs`, since masked-image pretraining conventionally runs much
    /// longer than the fine-tuning that follows it.
    pub ssl_epochs: Option<usize>,
    /// Score threshold for image-level confusion counts during eval.
    pub score_threshold: f64,
    /// Candidate threshold and NMS IoU used by `detect` during eval.
    pub det_score_threshold: f64,
    pub nms_iou: f64,
    /// Audit switch: compute the gather term on L2-normalized embeddings
    /// (degenerate constant-zero reading) instead of raw norms.
    pub gather_normalized: bool,
    /// Ablation switch: update each branch from its own backward pass
    /// instead of one combined backward.
    pub alternating_updates: bool,
    /// Random horizontal flip with box mirroring.
    pub augment_hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            mask_rate: 0.6,
            image_size: 512,
            patch_size: 32,
            w_recon: 1.0,
            w_tc: 1.0,
            w_cls: 1.0,
            w_reg: 1.0,
            lr_det: 1e-3,
            lr_recon: 1e-4,
            lr_drop_epochs: vec![26, 72],
            lr_drop_factor: 0.1,
            seed: 0,
            paradigm: Paradigm::Ssad,
            encoder_width: 64,
            detector: "conv".into(),
            extractor: "toy".into(),
            ssl_epochs: None,
            score_threshold: 0.5,
            det_score_threshold: 0.05,
            nms_iou: 0.5,
            gather_normalized: false,
            alternating_updates: false,
            augment_hflip: false,
        }
    }
}

impl TrainConfig {
    // `!(x > 0)` instead of `x <= 0` so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(
                "mask_rate",
                format!("must lie in (0, 1), got {}", self.mask_rate),
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "image_size",
                format!(
                    "{} must be a positive multiple of patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.image_size.is_multiple_of(32) {
            return Err(Error::config(
                "image_size",
                format!("{} must be divisible by the encoder stride 32", self.image_size),
            ));
        }
        if !(self.lr_det > 0.0) || !(self.lr_recon > 0.0) {
            return Err(Error::config("lr_det/lr_recon", "rates must be positive"));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::config("lr_drop_factor", "must be positive"));
        }
        let mut prev = 0usize;
        for &d in &self.lr_drop_epochs {
            if d < 1 || d > self.epochs {
                return Err(Error::config(
                    "lr_drop_epochs",
                    format!("drop epoch {d} outside [1, {}]", self.epochs),
                ));
            }
            if d <= prev {
                return Err(Error::config("lr_drop_epochs", "must be strictly increasing"));
            }
            prev = d;
        }
        for (name, w) in [
            ("w_recon", self.w_recon),
            ("w_tc", self.w_tc),
            ("w_cls", self.w_cls),
            ("w_reg", self.w_reg),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(name, "weights must be finite and non-negative"));
            }
        }
        if self.encoder_width < 4 || !self.encoder_width.is_multiple_of(4) {
            return Err(Error::config("encoder_width", "must be a positive multiple of 4"));
        }
        if let Some(e) = self.ssl_epochs {
            if e == 0 {
                return Err(Error::config("ssl_epochs", "must be positive when set"));
            }
        }
        Ok(())
    }

    pub fn ssl_epochs_or_default(&self) -> usize {
        // Two-stage pipelines spend most of their budget on pretraining;
        // a 1:1 split would misrepresent the paradigm being compared.
        self.ssl_epochs.unwrap_or(3 * self.epochs)
    }
}

/// Mean per-component losses for one step or one epoch. Branches that are
/// not trained report `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub recon: Option<f64>,
    pub tc_align: Option<f64>,
    pub tc_gather: Option<f64>,
    pub det_cls: Option<f64>,
    pub det_reg: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.tc_align, self.tc_gather, self.det_cls, self.det_reg]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
            && self.total.is_finite()
    }
}

/// Loss weights in effect for one phase (paradigms zero out branches).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveWeights {
    pub recon: f64,
    pub tc: f64,
    pub cls: f64,
    pub reg: f64,
}

impl EffectiveWeights {
    pub fn use_recon_branch(&self) -> bool {
        self.recon != 0.0 || self.tc != 0.0
    }

    pub fn use_det_branch(&self) -> bool {
        self.cls != 0.0 || self.reg != 0.0
    }

    /// Weights for a single-phase run of the given paradigm.
    pub fn for_paradigm(config: &TrainConfig, paradigm: Paradigm) -> Self {
        match paradigm {
            Paradigm::Ssad => Self {
                recon: config.w_recon,
                tc: config.w_tc,
                cls: config.w_cls,
                reg: config.w_reg,
            },
            Paradigm::DetectionOnly => Self {
                recon: 0.0,
                tc: 0.0,
                cls: config.w_cls,
                reg: config.w_reg,
            },
            // The two-stage paradigm is driven phase-by-phase by `train`.
            Paradigm::SslThenFt => Self {
                recon: config.w_recon,
                tc: config.w_tc,
                cls: 0.0,
                reg: 0.0,
            },
        }
    }
}

/// Stable sub-seed per named RNG stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// In-memory dataset: images resized to the pipeline target with boxes
/// rescaled accordingly.
pub struct Dataset<T> {
    pub images: Vec<ImageBuffer<T>>,
    pub records: Vec<AnnotationRecord>,
    pub categories: CategoryTable,
    pub image_size: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load a COCO-layout dataset directory and resize everything.
    pub fn load(dir: &Path, task: TaskKind, image_size: usize, patch_size: usize) -> Result<Self> {
        let loaded = crate::coco::load_coco_annotations(&annotation_path(dir), task)?;
        let mut images = Vec::with_capacity(loaded.records.len());
        let mut records = Vec::with_capacity(loaded.records.len());
        for record in &loaded.records {
            let img: ImageBuffer<T> = read_image(&image_path(dir, &record.file_name))?;
            let (img, record) = resize_with_boxes(&img, record, image_size, patch_size)?;
            images.push(img);
            records.push(record);
        }
        Ok(Self {
            images,
            records,
            categories: loaded.categories,
            image_size,
        })
    }

    /// Wrap already-synthesized data, applying the same resize path.
    pub fn from_memory(
        images: &[ImageBuffer<T>],
        records: &[AnnotationRecord],
        categories: CategoryTable,
        image_size: usize,
        patch_size: usize,
    ) -> Result<Self> {
        let mut out_images = Vec::with_capacity(images.len());
        let mut out_records = Vec::with_capacity(records.len());
        for (img, record) in images.iter().zip(records) {
            let (img, record) = resize_with_boxes(img, record, image_size, patch_size)?;
            out_images.push(img);
            out_records.push(record);
        }
        Ok(Self {
            images: out_images,
            records: out_records,
            categories,
            image_size,
        })
    }
}

/// The jointly trained model: shared encoder plus both branch heads over
/// one parameter store. The frozen extractor lives outside the store, so
/// it can never be updated.
pub struct SsadModel<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: ConvEncoder,
    pub decoder: ReconDecoder,
    pub detector: Box<dyn DetectorAdapter<T>>,
    pub extractor: Option<Box<dyn FrozenExtractor<T>>>,
    pub n_categories: usize,
    pub image_channels: usize,
    pub image_size: usize,
    gather_mode: GatherNormalization,
}

impl<T: Scalar> SsadModel<T> {
    /// Construct every component in a fixed order so parameter identity
    /// is independent of the paradigm. `with_extractor` controls whether
    /// the texture branch is materialized (it holds no store parameters
    /// either way).
    pub fn new(
        config: &TrainConfig,
        n_categories: usize,
        image_channels: usize,
        with_extractor: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(
            &mut store,
            &EncoderConfig {
                in_channels: image_channels,
                width: config.encoder_width,
                seed: derive_seed(config.seed, "init/encoder"),
            },
        )?;
        let decoder = ReconDecoder::new(
            &mut store,
            encoder.out_channels,
            image_channels,
            derive_seed(config.seed, "init/decoder"),
        )?;
        let detector = create_detector(
            &config.detector,
            &mut store,
            encoder.out_channels,
            n_categories,
            derive_seed(config.seed, "init/detector"),
        )?;
        let extractor = if with_extractor {
            Some(create_extractor(
                &config.extractor,
                image_channels,
                derive_seed(config.seed, "init/extractor"),
            )?)
        } else {
            None
        };
        Ok(Self {
            store,
            encoder,
            decoder,
            detector,
            extractor,
            n_categories,
            image_channels,
            image_size: config.image_size,
            gather_mode: if config.gather_normalized {
                GatherNormalization::L2Normalized
            } else {
                GatherNormalization::Raw
            },
        })
    }

    fn grid(&self) -> (usize, usize) {
        (
            self.image_size / self.encoder.stride,
            self.image_size / self.encoder.stride,
        )
    }

    /// Rebuild the full training-time model from a checkpoint; requires
    /// every live parameter (including the decoder) to be present, so it
    /// rejects stripped checkpoints.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let with_extractor =
            ck.config.paradigm != Paradigm::DetectionOnly && ck.config.w_tc != 0.0;
        let mut model = SsadModel::new(&ck.config, ck.n_categories, ck.image_channels, with_extractor)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            if !ck.params.contains_key(&name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is missing parameter `{name}` (stripped checkpoint?)"
                )));
            }
        }
        model.store.import(&ck.params)?;
        Ok(model)
    }

    /// Forward both branches over a batch, optionally accumulating
    /// gradients for the weighted total into the store. `masks` must hold
    /// one entry per image when the reconstruction branch is active.
    pub fn joint_forward_backward(
        &mut self,
        images: &[&ImageBuffer<T>],
        records: &[&AnnotationRecord],
        masks: Option<&[MaskSpec]>,
        weights: &EffectiveWeights,
        compute_grads: bool,
    ) -> Result<LossBundle> {
        let batch = images.len();
        if batch == 0 || records.len() != batch {
            return Err(Error::Other("empty or inconsistent batch".into()));
        }
        let inv_batch = 1.0 / batch as f64;
        let (gh, gw) = self.grid();

        let mut sum_cls = 0.0;
        let mut sum_reg = 0.0;
        let mut sum_recon = 0.0;
        let mut sum_align = 0.0;
        let mut sum_gather = 0.0;

        if weights.use_det_branch() {
            for (img, record) in images.iter().zip(records) {
                let acts = self.encoder.forward_cached(&self.store, img)?;
                let outputs = self.detector.forward(&self.store, &acts.output);
                let targets =
                    assign_targets(record, gh, gw, self.encoder.stride, self.n_categories)?;
                let (cls, reg, mut grad_cls, mut grad_reg) =
                    det_loss_with_grads(&outputs, &targets)?;
                sum_cls += cls.to_f64_lossy() * inv_batch;
                sum_reg += reg.to_f64_lossy() * inv_batch;
                if compute_grads {
                    grad_cls.scale(T::from_f64_lossy(weights.cls * inv_batch));
                    grad_reg.scale(T::from_f64_lossy(weights.reg * inv_batch));
                    let grad_features =
                        self.detector
                            .backward(&mut self.store, &acts.output, &grad_cls, &grad_reg);
                    self.encoder.backward(&mut self.store, &acts, &grad_features);
                }
            }
        }

        if weights.use_recon_branch() {
            let masks = masks.ok_or_else(|| {
                Error::Mask("reconstruction branch active but no masks supplied".into())
            })?;
            if masks.len() != batch {
                return Err(Error::Mask(format!(
                    "{} masks for a batch of {batch}",
                    masks.len()
                )));
            }
            for (i, img) in images.iter().enumerate() {
                let masked = apply_mask(img, &masks[i], MaskFill::Zero)?;
                let acts = self.encoder.forward_cached(&self.store, &masked)?;
                let dec_acts =
                    self.decoder
                        .forward_cached(&self.store, &acts.output, self.image_size)?;
                let recon_img = ImageBuffer::from_tensor(&dec_acts.output);
                let loss_r = recon_loss(img, &recon_img, &masks[i])?;
                sum_recon += loss_r.to_f64_lossy() * inv_batch;

                let mut grad_image = if compute_grads && weights.recon != 0.0 {
                    let mut g = recon_loss_backward(img, &recon_img, &masks[i])?;
                    g.scale(T::from_f64_lossy(weights.recon * inv_batch));
                    g
                } else {
                    crate::nn::Tensor3::zeros(recon_img.channels, recon_img.height, recon_img.width)
                };

                if weights.tc != 0.0 {
                    let extractor = self.extractor.as_ref().ok_or_else(|| {
                        Error::Loss("texture loss requested but no extractor is loaded".into())
                    })?;
                    let vd = extractor.extract(img)?;
                    let vr = extractor.extract(&recon_img)?;
                    let (_, align, gather) = tc_loss_with(&vd, &vr, self.gather_mode)?;
                    sum_align += align.to_f64_lossy() * inv_batch;
                    sum_gather += gather.to_f64_lossy() * inv_batch;
                    if compute_grads {
                        let mut grad_emb = tc_loss_backward(&vd, &vr, self.gather_mode)?;
                        let w = T::from_f64_lossy(weights.tc * inv_batch);
                        for g in &mut grad_emb {
                            *g *= w;
                        }
                        let grad_pixels = extractor.extract_backward(&recon_img, &grad_emb)?;
                        grad_image.add_assign(&grad_pixels);
                    }
                }

                if compute_grads {
                    let grad_features = self.decoder.backward(&mut self.store, &dec_acts, &grad_image);
                    self.encoder.backward(&mut self.store, &acts, &grad_features);
                }
            }
        }

        let det_on = weights.use_det_branch();
        let rec_on = weights.use_recon_branch();
        let tc_on = rec_on && weights.tc != 0.0;
        let total = weights.recon * sum_recon
            + weights.tc * (sum_align + sum_gather)
            + weights.cls * sum_cls
            + weights.reg * sum_reg;
        Ok(LossBundle {
            recon: rec_on.then_some(sum_recon),
            tc_align: tc_on.then_some(sum_align),
            tc_gather: tc_on.then_some(sum_gather),
            det_cls: det_on.then_some(sum_cls),
            det_reg: det_on.then_some(sum_reg),
            total,
        })
    }
}

/// One phase of optimization: owns the model, the optimizer split and the
/// seeded RNG streams.
pub struct Trainer<T: Scalar> {
    pub model: SsadModel<T>,
    pub config: TrainConfig,
    pub weights: EffectiveWeights,
    opt_enc: AdamW,
    opt_head: AdamW,
    opt_dec: Sgd,
    shuffle_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    pub epochs_done: usize,
    steps_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        config: &TrainConfig,
        n_categories: usize,
        image_channels: usize,
        weights: EffectiveWeights,
    ) -> Result<Self> {
        let with_extractor = weights.tc != 0.0;
        let model = SsadModel::new(config, n_categories, image_channels, with_extractor)?;
        let opt_enc = AdamW::new(model.encoder.param_ids());
        let opt_head = AdamW::new(model.detector.head_param_ids());
        let opt_dec = Sgd::new(model.decoder.param_ids());
        Ok(Self {
            model,
            config: config.clone(),
            weights,
            opt_enc,
            opt_head,
            opt_dec,
            shuffle_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle")),
            mask_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "mask")),
            aug_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "augment")),
            epochs_done: 0,
            steps_done: 0,
        })
    }

    fn sample_masks(&mut self, n: usize) -> Result<Vec<MaskSpec>> {
        let rows = self.config.image_size / self.config.patch_size;
        (0..n)
            .map(|_| {
                generate_mask(rows, rows, self.config.patch_size, self.config.mask_rate, self.mask_rng.gen())
            })
            .collect()
    }

    /// One optimization step over the images at `indices`.
    pub fn train_step(&mut self, dataset: &Dataset<T>, indices: &[usize]) -> Result<LossBundle> {
        let lr_epoch = self.epochs_done + 1;
        let lr_det = lr_at_epoch(
            self.config.lr_det,
            &self.config.lr_drop_epochs,
            self.config.lr_drop_factor,
            lr_epoch,
        );
        let lr_recon = lr_at_epoch(
            self.config.lr_recon,
            &self.config.lr_drop_epochs,
            self.config.lr_drop_factor,
            lr_epoch,
        );
        self.train_step_at(dataset, indices, lr_det, lr_recon)
    }

    fn gather_batch(
        &mut self,
        dataset: &Dataset<T>,
        indices: &[usize],
    ) -> (Vec<ImageBuffer<T>>, Vec<AnnotationRecord>) {
        let mut images = Vec::with_capacity(indices.len());
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            if self.config.augment_hflip && self.aug_rng.gen_bool(0.5) {
                let (img, rec) = horizontal_flip(&dataset.images[i], &dataset.records[i]);
                images.push(img);
                records.push(rec);
            } else {
                images.push(dataset.images[i].clone());
                records.push(dataset.records[i].clone());
            }
        }
        (images, records)
    }

    fn train_step_at(
        &mut self,
        dataset: &Dataset<T>,
        indices: &[usize],
        lr_det: f64,
        lr_recon: f64,
    ) -> Result<LossBundle> {
        let (images, records) = self.gather_batch(dataset, indices);
        let image_refs: Vec<&ImageBuffer<T>> = images.iter().collect();
        let record_refs: Vec<&AnnotationRecord> = records.iter().collect();
        let masks = if self.weights.use_recon_branch() {
            Some(self.sample_masks(indices.len())?)
        } else {
            None
        };

        let bundle = if self.config.alternating_updates {
            // Branch-by-branch: reconstruction backward + its update, then
            // detection backward + its update.
            let mut merged = LossBundle {
                recon: None,
                tc_align: None,
                tc_gather: None,
                det_cls: None,
                det_reg: None,
                total: 0.0,
            };
            if self.weights.use_recon_branch() {
                let w = EffectiveWeights { cls: 0.0, reg: 0.0, ..self.weights };
                self.model.store.zero_grads();
                let b = self.model.joint_forward_backward(
                    &image_refs,
                    &record_refs,
                    masks.as_deref(),
                    &w,
                    true,
                )?;
                self.opt_enc.step(&mut self.model.store, lr_det);
                self.opt_dec.step(&mut self.model.store, lr_recon);
                merged.recon = b.recon;
                merged.tc_align = b.tc_align;
                merged.tc_gather = b.tc_gather;
                merged.total += b.total;
            }
            if self.weights.use_det_branch() {
                let w = EffectiveWeights { recon: 0.0, tc: 0.0, ..self.weights };
                self.model.store.zero_grads();
                let b = self.model.joint_forward_backward(
                    &image_refs,
                    &record_refs,
                    None,
                    &w,
                    true,
                )?;
                self.opt_enc.step(&mut self.model.store, lr_det);
                self.opt_head.step(&mut self.model.store, lr_det);
                merged.det_cls = b.det_cls;
                merged.det_reg = b.det_reg;
                merged.total += b.total;
            }
            merged
        } else {
            // One combined backward; shared-encoder gradients accumulate
            // from both branches before a single update.
            self.model.store.zero_grads();
            let bundle = self.model.joint_forward_backward(
                &image_refs,
                &record_refs,
                masks.as_deref(),
                &self.weights,
                true,
            )?;
            if self.weights.use_recon_branch() || self.weights.use_det_branch() {
                self.opt_enc.step(&mut self.model.store, lr_det);
            }
            if self.weights.use_det_branch() {
                self.opt_head.step(&mut self.model.store, lr_det);
            }
            if self.weights.use_recon_branch() {
                self.opt_dec.step(&mut self.model.store, lr_recon);
            }
            bundle
        };

        self.steps_done += 1;
        if !bundle.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epochs_done + 1,
                step: self.steps_done,
                detail: format!("{bundle:?}"),
            });
        }
        Ok(bundle)
    }

    /// Run one epoch (shuffle, batch, step); returns the per-component
    /// means weighted by batch size.
    pub fn run_epoch(&mut self, dataset: &Dataset<T>) -> Result<LossBundle> {
        if dataset.is_empty() {
            return Err(Error::Other("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut sums = [0.0f64; 6];
        let mut seen = [false; 6];
        let mut n = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let b = self.train_step(dataset, chunk)?;
            let k = chunk.len() as f64;
            for (slot, value) in [
                b.recon,
                b.tc_align,
                b.tc_gather,
                b.det_cls,
                b.det_reg,
                Some(b.total),
            ]
            .iter()
            .enumerate()
            {
                if let Some(v) = value {
                    sums[slot] += v * k;
                    seen[slot] = true;
                }
            }
            n += chunk.len();
        }
        self.epochs_done += 1;
        let inv = 1.0 / n as f64;
        let pick = |i: usize| seen[i].then_some(sums[i] * inv);
        Ok(LossBundle {
            recon: pick(0),
            tc_align: pick(1),
            tc_gather: pick(2),
            det_cls: pick(3),
            det_reg: pick(4),
            total: sums[5] * inv,
        })
    }

    /// Learning rates in effect for the upcoming epoch.
    pub fn current_rates(&self) -> (f64, f64) {
        let e = self.epochs_done + 1;
        (
            lr_at_epoch(self.config.lr_det, &self.config.lr_drop_epochs, self.config.lr_drop_factor, e),
            lr_at_epoch(self.config.lr_recon, &self.config.lr_drop_epochs, self.config.lr_drop_factor, e),
        )
    }

    /// Snapshot the full training state.
    pub fn checkpoint(&self, categories: &CategoryTable) -> Checkpoint {
        let all_ids: Vec<_> = self.model.store.ids().collect();
        let (enc_t, enc_m) = self.opt_enc.export_state();
        let (head_t, head_m) = self.opt_head.export_state();
        Checkpoint {
            format_version: crate::checkpoint::CHECKPOINT_FORMAT,
            config: self.config.clone(),
            epoch: self.epochs_done,
            n_categories: self.model.n_categories,
            image_channels: self.model.image_channels,
            category_names: categories.names.clone(),
            category_raw_ids: categories.raw_ids.clone(),
            params: self.model.store.export(&all_ids),
            opt_enc: OptimSnapshot { t: enc_t, moments: enc_m },
            opt_head: OptimSnapshot { t: head_t, moments: head_m },
            rng: Some(RngSnapshot {
                shuffle: self.shuffle_rng.clone(),
                mask: self.mask_rng.clone(),
                augment: self.aug_rng.clone(),
            }),
        }
    }

    /// Rebuild a trainer from a checkpoint (parameters, optimizer moments
    /// and RNG streams all restored).
    pub fn restore(ck: &Checkpoint, weights: EffectiveWeights) -> Result<Self> {
        let mut t = Trainer::new(&ck.config, ck.n_categories, ck.image_channels, weights)?;
        t.model.store.import(&ck.params)?;
        t.opt_enc.import_state(ck.opt_enc.t, ck.opt_enc.moments.clone());
        t.opt_head.import_state(ck.opt_head.t, ck.opt_head.moments.clone());
        t.epochs_done = ck.epoch;
        if let Some(rng) = &ck.rng {
            t.shuffle_rng = rng.shuffle.clone();
            t.mask_rng = rng.mask.clone();
            t.aug_rng = rng.augment.clone();
        }
        Ok(t)
    }

    /// Import only encoder parameters from a pretraining checkpoint.
    pub fn adopt_encoder(&mut self, ck: &Checkpoint) -> Result<()> {
        let enc_names: Vec<String> = self
            .model
            .encoder
            .param_ids()
            .iter()
            .map(|&id| self.model.store.name(id).to_string())
            .collect();
        let subset: BTreeMap<_, _> = ck
            .params
            .iter()
            .filter(|(name, _)| enc_names.iter().any(|n| n == *name))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if subset.len() != enc_names.len() {
            return Err(Error::Checkpoint(format!(
                "pretraining checkpoint holds {} of {} encoder parameters",
                subset.len(),
                enc_names.len()
            )));
        }
        self.model.store.import(&subset)
    }
}

/// Per-epoch log row; serialized one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_det: f64,
    pub lr_recon: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Outcome of one training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub label: String,
    pub epochs: usize,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

/// Outcome of a full `train` invocation (1 phase, or 2 for ssl_then_ft).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub paradigm: Paradigm,
    pub phases: Vec<PhaseOutcome>,
    pub total_seconds: f64,
    pub final_checkpoint: PathBuf,
}

fn run_phase<T: Scalar>(
    trainer: &mut Trainer<T>,
    dataset: &Dataset<T>,
    epochs: usize,
    label: &str,
    dir: &Path,
) -> Result<PhaseOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("epochs.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let started = Instant::now();
    for _ in 0..epochs {
        let (lr_det, lr_recon) = trainer.current_rates();
        let losses = trainer.run_epoch(dataset)?;
        let row = EpochLog {
            epoch: trainer.epochs_done,
            lr_det,
            lr_recon,
            losses,
        };
        serde_json::to_writer(&mut log, &row).map_err(|e| Error::Checkpoint(e.to_string()))?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        // One epoch takes seconds; flushing per row keeps the log
        // tailable and complete up to the last finished epoch.
        log.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    let seconds = started.elapsed().as_secs_f64();

    let ck = trainer.checkpoint(&dataset.categories);
    let ck_path = dir.join("checkpoint.json");
    save_checkpoint(&ck, &ck_path)?;
    Ok(PhaseOutcome {
        label: label.to_string(),
        epochs,
        seconds,
        checkpoint: ck_path,
    })
}

/// Train under the configured paradigm, writing per-epoch logs, phase
/// checkpoints and a timing summary into `out_dir`.
pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Other("dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n_categories = dataset.categories.len();
    let channels = dataset.images[0].channels;

    let mut phases = Vec::new();
    let final_checkpoint;
    match config.paradigm {
        Paradigm::Ssad | Paradigm::DetectionOnly => {
            let weights = EffectiveWeights::for_paradigm(config, config.paradigm);
            let mut trainer = Trainer::new(config, n_categories, channels, weights)?;
            let phase = run_phase(
                &mut trainer,
                dataset,
                config.epochs,
                config.paradigm.as_str(),
                out_dir,
            )?;
            final_checkpoint = phase.checkpoint.clone();
            phases.push(phase);
        }
        Paradigm::SslThenFt => {
            // Phase 1: self-supervised pretraining of encoder + decoder.
            let w1 = EffectiveWeights {
                recon: config.w_recon,
                tc: config.w_tc,
                cls: 0.0,
                reg: 0.0,
            };
            let mut t1 = Trainer::new(config, n_categories, channels, w1)?;
            let p1 = run_phase(
                &mut t1,
                dataset,
                config.ssl_epochs_or_default(),
                "ssl_pretrain",
                &out_dir.join("phase1"),
            )?;
            drop(t1);

            // Phase 2: detection fine-tuning from the pretrained encoder.
            let pretrain = load_checkpoint(&p1.checkpoint)?;
            let w2 = EffectiveWeights {
                recon: 0.0,
                tc: 0.0,
                cls: config.w_cls,
                reg: config.w_reg,
            };
            let mut t2 = Trainer::new(config, n_categories, channels, w2)?;
            t2.adopt_encoder(&pretrain)?;
            let p2 = run_phase(
                &mut t2,
                dataset,
                config.epochs,
                "detection_finetune",
                &out_dir.join("phase2"),
            )?;

            // Surface the fine-tuned checkpoint at the run root.
            final_checkpoint = out_dir.join("checkpoint.json");
            std::fs::copy(&p2.checkpoint, &final_checkpoint)
                .map_err(|e| Error::io(&final_checkpoint, e))?;
            phases.push(p1);
            phases.push(p2);
        }
    }

    // End-to-end wall clock, not the sum of phase loops: checkpoint
    // hand-off between phases is a real cost of the two-stage paradigm
    // and belongs in its reported total.
    let total_seconds = started.elapsed().as_secs_f64();
    let outcome = TrainOutcome {
        paradigm: config.paradigm,
        phases,
        total_seconds,
        final_checkpoint,
    };
    let timing_path = out_dir.join("timing.json");
    let file = std::fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
    serde_json::to_writer_pretty(file, &outcome).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(outcome)
}

/// Detector-only model reconstructed from a checkpoint; holds neither the
/// decoder nor the texture extractor.
pub struct InferenceModel<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: ConvEncoder,
    pub detector: Box<dyn DetectorAdapter<T>>,
    pub n_categories: usize,
    pub image_size: usize,
    pub categories: CategoryTable,
}

impl<T: Scalar> InferenceModel<T> {
    /// Build encoder + detection head and import their parameters. Works
    /// for both full and stripped checkpoints.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = &ck.config;
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(
            &mut store,
            &EncoderConfig {
                in_channels: ck.image_channels,
                width: config.encoder_width,
                seed: derive_seed(config.seed, "init/encoder"),
            },
        )?;
        let detector = create_detector(
            &config.detector,
            &mut store,
            encoder.out_channels,
            ck.n_categories,
            derive_seed(config.seed, "init/detector"),
        )?;
        // Every live parameter must come from the archive.
        let mut subset = BTreeMap::new();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let entry = ck.params.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
            })?;
            subset.insert(name, entry.clone());
        }
        store.import(&subset)?;
        Ok(Self {
            store,
            encoder,
            detector,
            n_categories: ck.n_categories,
            image_size: config.image_size,
            categories: CategoryTable {
                names: ck.category_names.clone(),
                raw_ids: ck.category_raw_ids.clone(),
            },
        })
    }

    pub fn detect(
        &self,
        img: &ImageBuffer<T>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        detect(
            self.detector.as_ref(),
            &self.store,
            &self.encoder,
            img,
            score_threshold,
            nms_iou,
        )
    }

    /// Run detection over a whole dataset and score it.
    #[allow(clippy::type_complexity)]
    pub fn evaluate(
        &self,
        dataset: &Dataset<T>,
        det_score_threshold: f64,
        nms_iou: f64,
        confusion_threshold: f64,
    ) -> Result<(Vec<(u64, Vec<Detection>)>, MetricReport)> {
        let mut per_image = Vec::with_capacity(dataset.len());
        let mut by_id = BTreeMap::new();
        for (img, record) in dataset.images.iter().zip(&dataset.records) {
            let dets = self.detect(img, det_score_threshold, nms_iou)?;
            by_id.insert(record.image_id, dets.clone());
            per_image.push((record.image_id, dets));
        }
        let evals = image_evals(&dataset.records, &by_id);
        let report = map_suite(
            &evals,
            self.n_categories,
            Some(&dataset.categories.names),
            confusion_threshold,
        );
        Ok((per_image, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            image_size: 64,
            encoder_width: 8,
            lr_drop_epochs: vec![],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let bad = [
            TrainConfig { epochs: 0, ..tiny_config() },
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { mask_rate: 1.0, ..tiny_config() },
            TrainConfig { mask_rate: 0.0, ..tiny_config() },
            TrainConfig { image_size: 65, ..tiny_config() },
            TrainConfig { image_size: 96, patch_size: 36, ..tiny_config() },
            TrainConfig { lr_det: 0.0, ..tiny_config() },
            TrainConfig { lr_drop_factor: 0.0, ..tiny_config() },
            TrainConfig { lr_drop_epochs: vec![0], ..tiny_config() },
            TrainConfig { lr_drop_epochs: vec![3], ..tiny_config() },
            TrainConfig { lr_drop_epochs: vec![2, 2], ..tiny_config() },
            TrainConfig { w_tc: -1.0, ..tiny_config() },
            TrainConfig { encoder_width: 6, ..tiny_config() },
            TrainConfig { ssl_epochs: Some(0), ..tiny_config() },
        ];
        for (i, config) in bad.iter().enumerate() {
            assert!(config.validate().is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn drop_epochs_must_fit_the_budget() {
        // The stock schedule only fits runs of at least 72 epochs.
        let config = TrainConfig { epochs: 30, ..TrainConfig::default() };
        assert!(config.validate().is_err());
        let config = TrainConfig { epochs: 72, ..TrainConfig::default() };
        config.validate().unwrap();
    }

    #[test]
    fn paradigm_parses_and_prints() {
        for p in [Paradigm::Ssad, Paradigm::DetectionOnly, Paradigm::SslThenFt] {
            assert_eq!(p.as_str().parse::<Paradigm>().unwrap(), p);
        }
        assert!("finetune".parse::<Paradigm>().is_err());
    }

    #[test]
    fn seed_streams_are_distinct_and_stable() {
        let tags = ["init/encoder", "init/decoder", "init/detector", "shuffle", "mask"];
        let seeds: Vec<u64> = tags.iter().map(|t| derive_seed(7, t)).collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(derive_seed(7, "mask"), derive_seed(7, "mask"));
        assert_ne!(derive_seed(7, "mask"), derive_seed(8, "mask"));
    }

    #[test]
    fn paradigm_weight_mapping() {
        let config = TrainConfig {
            w_recon: 0.5,
            w_tc: 0.25,
            w_cls: 2.0,
            w_reg: 1.5,
            ..tiny_config()
        };
        let ssad = EffectiveWeights::for_paradigm(&config, Paradigm::Ssad);
        assert_eq!((ssad.recon, ssad.tc, ssad.cls, ssad.reg), (0.5, 0.25, 2.0, 1.5));
        assert!(ssad.use_recon_branch() && ssad.use_det_branch());

        let det = EffectiveWeights::for_paradigm(&config, Paradigm::DetectionOnly);
        assert_eq!((det.recon, det.tc), (0.0, 0.0));
        assert!(!det.use_recon_branch() && det.use_det_branch());

        let ssl = EffectiveWeights::for_paradigm(&config, Paradigm::SslThenFt);
        assert_eq!((ssl.cls, ssl.reg), (0.0, 0.0));
        assert!(ssl.use_recon_branch() && !ssl.use_det_branch());
    }

    #[test]
    fn model_construction_is_paradigm_independent() {
        let config = tiny_config();
        let a: SsadModel<f32> = SsadModel::new(&config, 3, 1, true).unwrap();
        let b: SsadModel<f32> = SsadModel::new(&config, 3, 1, false).unwrap();
        assert!(a.extractor.is_some() && b.extractor.is_none());
        let ids: Vec<_> = a.store.ids().collect();
        assert_eq!(a.store.len(), b.store.len());
        for id in ids {
            assert_eq!(a.store.name(id), b.store.name(id));
            assert_eq!(a.store.value(id), b.store.value(id));
        }
    }

    #[test]
    fn ssl_epochs_defaults_to_triple_epochs() {
        let mut config = tiny_config();
        assert_eq!(config.ssl_epochs_or_default(), 6);
        config.ssl_epochs = Some(5);
        assert_eq!(config.ssl_epochs_or_default(), 5);
    }
}
