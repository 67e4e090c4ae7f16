//! Random patch masking over a fixed grid.
//!
//! Exact-count masking: `|masked| = floor(rate * cells)`, sampled uniformly
//! without replacement, fully determined by the seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Scalar;

/// The set of masked patch indices over a `grid_rows x grid_cols` grid.
///
/// Patch index `i` covers rows `(i / grid_cols) * patch_size ..` and columns
/// `(i % grid_cols) * patch_size ..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    /// Sorted, distinct patch indices.
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_indices.binary_search(&patch).is_ok()
    }

    /// Pixel-level membership.
    pub fn covers_pixel(&self, y: usize, x: usize) -> bool {
        let patch = (y / self.patch_size) * self.grid_cols + x / self.patch_size;
        self.is_masked(patch)
    }

    pub fn check_geometry(&self, height: usize, width: usize) -> Result<()> {
        if self.grid_rows * self.patch_size != height || self.grid_cols * self.patch_size != width {
            return Err(Error::Geometry(format!(
                "mask grid {}x{} with patch {} does not tile a {}x{} image",
                self.grid_rows, self.grid_cols, self.patch_size, height, width
            )));
        }
        Ok(())
    }
}

/// Fill value for masked patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskFill<T> {
    Zero,
    /// A caller-supplied token value (e.g. a learned mask token).
    Token(T),
}

/// Sample exactly `floor(mask_rate * cells)` distinct patches.
pub fn generate_mask(
    grid_rows: usize,
    grid_cols: usize,
    patch_size: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskSpec> {
    let cells = grid_rows * grid_cols;
    if cells == 0 {
        return Err(Error::Mask("degenerate grid with 0 cells".into()));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Mask(format!(
            "mask rate {mask_rate} outside (0, 1)"
        )));
    }
    let count = (mask_rate * cells as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..cells).collect();
    let (chosen, _) = indices.partial_shuffle(&mut rng, count);
    let mut masked: Vec<usize> = chosen.to_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        grid_rows,
        grid_cols,
        patch_size,
        masked_indices: masked,
        seed,
    })
}

/// Replace pixels inside masked patches by the fill value; every other pixel
/// is bit-identical to the input.
pub fn apply_mask<T: Scalar>(
    img: &ImageBuffer<T>,
    mask: &MaskSpec,
    fill: MaskFill<T>,
) -> Result<ImageBuffer<T>> {
    mask.check_geometry(img.height, img.width)?;
    let fill_value = match fill {
        MaskFill::Zero => T::zero(),
        MaskFill::Token(v) => v,
    };
    let mut out = img.clone();
    let p = mask.patch_size;
    for &patch in &mask.masked_indices {
        let py = (patch / mask.grid_cols) * p;
        let px = (patch % mask.grid_cols) * p;
        for c in 0..img.channels {
            for y in py..py + p {
                for x in px..px + p {
                    out.set(c, y, x, fill_value);
                }
            }
        }
    }
    Ok(out)
}
