//! Synthetic texture dataset: a desk-scale stand-in for panoramic X-rays.
//!
//! Images are grayscale: a smooth background plus rectangular objects whose
//! category is carried purely by procedural stripe texture (orientation),
//! not by shape or brightness. Ground-truth boxes are tight around each
//! rectangle. Everything is deterministic given the seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coco::{
    annotation_path, image_path, AnnotationRecord, CocoAnnotation, CocoCategory, CocoFile,
    CocoImage, GroundTruthBox, TaskKind,
};
use crate::error::{Error, Result};
use crate::image::{write_png, ImageBuffer};
use crate::scalar::Scalar;

/// Tunables for the generator; the defaults are what the CLI uses.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_images: usize,
    pub image_size: usize,
    pub n_categories: usize,
    pub seed: u64,
    /// Objects per image, inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length relative to the image size.
    pub min_rel_size: f64,
    pub max_rel_size: f64,
    /// Box centers are re-sampled until they land in distinct cells of this
    /// granularity, so center-cell target assignment stays collision-free at
    /// the reference-encoder stride.
    pub assignment_cell: usize,
    /// Stripe wavelength in pixels.
    pub wavelength: f64,
    /// Std-dev of the additive pixel noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_images: 100,
            image_size: 96,
            n_categories: 3,
            seed: 0,
            min_objects: 1,
            max_objects: 3,
            min_rel_size: 0.22,
            max_rel_size: 0.40,
            assignment_cell: 32,
            wavelength: 6.0,
            noise: 0.02,
        }
    }
}

/// Stripe orientation for a category, evenly spread over the half circle.
pub fn category_angle(category: usize, n_categories: usize) -> f64 {
    PI * category as f64 / n_categories as f64
}

pub fn category_name(category: usize, n_categories: usize) -> String {
    let deg = (180.0 * category as f64 / n_categories as f64).round() as usize;
    format!("stripes_{deg:03}")
}

/// Category table matching what `write_toy_dataset` serializes, for
/// in-memory pipelines that skip the disk roundtrip.
pub fn category_table(n_categories: usize) -> crate::coco::CategoryTable {
    crate::coco::CategoryTable {
        names: (0..n_categories)
            .map(|k| category_name(k, n_categories))
            .collect(),
        raw_ids: (0..n_categories as i64).collect(),
    }
}

/// Generate `n_images` textured images with tight ground-truth boxes.
pub fn synthesize_toy_dataset<T: Scalar>(
    n_images: usize,
    image_size: usize,
    n_categories: usize,
    seed: u64,
) -> Result<(Vec<ImageBuffer<T>>, Vec<AnnotationRecord>)> {
    synthesize_with(&SynthParams {
        n_images,
        image_size,
        n_categories,
        seed,
        ..SynthParams::default()
    })
}

pub fn synthesize_with<T: Scalar>(
    params: &SynthParams,
) -> Result<(Vec<ImageBuffer<T>>, Vec<AnnotationRecord>)> {
    if params.n_categories < 2 {
        return Err(Error::config(
            "n_categories",
            "toy dataset needs at least 2 categories",
        ));
    }
    if params.n_categories > TaskKind::Enumeration.max_categories() {
        return Err(Error::config("n_categories", "at most 32 supported"));
    }
    if params.min_objects == 0 || params.min_objects > params.max_objects {
        return Err(Error::config("min_objects", "need 1 <= min <= max"));
    }
    let task = if params.n_categories <= TaskKind::Disease.max_categories() {
        TaskKind::Disease
    } else {
        TaskKind::Enumeration
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut images = Vec::with_capacity(params.n_images);
    let mut records = Vec::with_capacity(params.n_images);
    for idx in 0..params.n_images {
        let (img, boxes) = render_image(params, &mut rng)?;
        images.push(img.cast::<T>());
        records.push(AnnotationRecord {
            image_id: idx as u64 + 1,
            file_name: format!("img_{:05}.png", idx + 1),
            boxes,
            task,
        });
    }
    Ok((images, records))
}

fn render_image(
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuffer<f64>, Vec<GroundTruthBox>)> {
    let s = params.image_size;
    let sf = s as f64;

    // Smooth background: a handful of low-frequency sinusoids around 0.5.
    let n_waves = 3;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let fx = rng.gen_range(0.3..1.5) / sf;
            let fy = rng.gen_range(0.3..1.5) / sf;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.02..0.06);
            (fx, fy, phase, amp)
        })
        .collect();

    let n_objects = rng.gen_range(params.min_objects..=params.max_objects);
    let cell = params.assignment_cell.max(1);
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let mut cells_used: Vec<(usize, usize)> = Vec::new();
    let mut textures = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n_objects && attempts < 200 {
        attempts += 1;
        let w = rng.gen_range(params.min_rel_size..params.max_rel_size) * sf;
        let h = rng.gen_range(params.min_rel_size..params.max_rel_size) * sf;
        let x0 = rng.gen_range(2.0..(sf - w - 2.0));
        let y0 = rng.gen_range(2.0..(sf - h - 2.0));
        let candidate = GroundTruthBox::new(
            x0.round(),
            y0.round(),
            (x0 + w).round(),
            (y0 + h).round(),
            rng.gen_range(0..params.n_categories),
        )?;
        let (cx, cy) = candidate.center();
        let ccell = ((cx / cell as f64) as usize, (cy / cell as f64) as usize);
        let overlaps = boxes.iter().any(|b| {
            let ix = (candidate.x_max.min(b.x_max) - candidate.x_min.max(b.x_min)).max(0.0);
            let iy = (candidate.y_max.min(b.y_max) - candidate.y_min.max(b.y_min)).max(0.0);
            ix * iy > 0.0
        });
        if overlaps || cells_used.contains(&ccell) {
            continue;
        }
        cells_used.push(ccell);
        // Per-instance texture jitter: phase, small frequency wobble, contrast.
        textures.push((
            category_angle(candidate.category_id, params.n_categories),
            rng.gen_range(0.0..2.0 * PI),
            params.wavelength * rng.gen_range(0.9..1.1),
            rng.gen_range(0.16..0.26),
        ));
        boxes.push(candidate);
    }

    let mut img = ImageBuffer::<f64>::zeros(1, s, s);
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = 0.5;
            for &(fx, fy, phase, amp) in &waves {
                v += amp * (2.0 * PI * (fx * xf + fy * yf) + phase).sin();
            }
            for (b, &(angle, phase, wavelength, amp)) in boxes.iter().zip(&textures) {
                if xf >= b.x_min && xf < b.x_max && yf >= b.y_min && yf < b.y_max {
                    let u = xf * angle.cos() + yf * angle.sin();
                    v += amp * (2.0 * PI * u / wavelength + phase).sin();
                    break;
                }
            }
            v += params.noise * gaussian(rng);
            img.set(0, y, x, v.clamp(0.0, 1.0));
        }
    }
    Ok((img, boxes))
}

/// Box-Muller from two uniform draws; keeps the RNG stream simple.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Write a generated dataset in the COCO-style directory layout.
pub fn write_toy_dataset<T: Scalar>(
    dir: &Path,
    images: &[ImageBuffer<T>],
    records: &[AnnotationRecord],
    n_categories: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir.join(crate::coco::IMAGE_DIR))
        .map_err(|e| Error::io(dir, e))?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: (0..n_categories)
            .map(|k| CocoCategory {
                id: k as i64,
                name: category_name(k, n_categories),
            })
            .collect(),
    };
    let mut ann_id = 1;
    for (img, rec) in images.iter().zip(records) {
        write_png(img, &image_path(dir, &rec.file_name))?;
        coco.images.push(CocoImage {
            id: rec.image_id,
            file_name: rec.file_name.clone(),
            width: img.width as u32,
            height: img.height as u32,
        });
        for b in &rec.boxes {
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: rec.image_id,
                category_id: b.category_id as i64,
                bbox: [b.x_min, b.y_min, b.width(), b.height()],
                area: b.area(),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    crate::coco::write_coco_file(&coco, &annotation_path(dir))
}
