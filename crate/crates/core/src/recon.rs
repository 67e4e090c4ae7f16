//! Reconstruction branch: decode shared-encoder features of the masked
//! image back to full resolution and score them with a masked-pixel L1
//! loss (only hidden patches are supervised).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::mask::MaskSpec;
use crate::nn::layers::{
    pixel_shuffle, pixel_shuffle_backward, silu, silu_backward, upsample2x, upsample2x_backward,
    Conv2d,
};
use crate::nn::{ParamId, ParamStore, Tensor3};
use crate::scalar::Scalar;

/// Upscale applied by [`ReconDecoder`]; equals the reference encoder stride.
pub const DECODER_UPSCALE: usize = 32;
const SHUFFLE_FACTOR: usize = 8;

/// Full-resolution reconstruction plus its masked L1 loss.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput<T> {
    pub image: ImageBuffer<T>,
    pub loss_recon: T,
}

/// Decoder: two nearest-upsample + conv stages, then a pointwise
/// projection expanded by pixel shuffle. Net upscale 2 * 2 * 8 = 32.
#[derive(Debug, Clone)]
pub struct ReconDecoder {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Cached intermediates for one decoder forward pass.
pub struct DecoderActivations<T> {
    up1: Tensor3<T>,
    pre1: Tensor3<T>,
    up2: Tensor3<T>,
    pre2: Tensor3<T>,
    act2: Tensor3<T>,
    pub output: Tensor3<T>,
}

impl ReconDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        feature_channels: usize,
        image_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if feature_channels < 4 || !feature_channels.is_multiple_of(4) {
            return Err(Error::config(
                "decoder.feature_channels",
                format!("must be a positive multiple of 4, got {feature_channels}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = feature_channels / 2;
        let narrow = feature_channels / 4;
        let shuffled = image_channels * SHUFFLE_FACTOR * SHUFFLE_FACTOR;
        Ok(Self {
            conv1: Conv2d::new(store, "dec.c1", feature_channels, mid, 3, 1, 1, &mut rng),
            conv2: Conv2d::new(store, "dec.c2", mid, narrow, 3, 1, 1, &mut rng),
            proj: Conv2d::new(store, "dec.proj", narrow, shuffled, 1, 1, 0, &mut rng),
            in_channels: feature_channels,
            out_channels: image_channels,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.conv1, &self.conv2, &self.proj]
            .iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    /// Decode features to an image of `target_size` per side.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &FeatureMap<T>,
        target_size: usize,
    ) -> Result<ImageBuffer<T>> {
        Ok(ImageBuffer::from_tensor(
            &self.forward_cached(store, features, target_size)?.output,
        ))
    }

    pub fn forward_cached<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &FeatureMap<T>,
        target_size: usize,
    ) -> Result<DecoderActivations<T>> {
        if features.height * DECODER_UPSCALE != target_size
            || features.width * DECODER_UPSCALE != target_size
        {
            return Err(Error::Geometry(format!(
                "decoder target {target_size} incompatible with {}x{} features (upscale {})",
                features.height, features.width, DECODER_UPSCALE
            )));
        }
        if features.channels != self.in_channels {
            return Err(Error::Geometry(format!(
                "decoder expects {} feature channels, got {}",
                self.in_channels, features.channels
            )));
        }
        let up1 = upsample2x(features);
        let pre1 = self.conv1.forward(store, &up1);
        let act1 = silu(&pre1);
        let up2 = upsample2x(&act1);
        let pre2 = self.conv2.forward(store, &up2);
        let act2 = silu(&pre2);
        let proj = self.proj.forward(store, &act2);
        let output = pixel_shuffle(&proj, SHUFFLE_FACTOR);
        Ok(DecoderActivations {
            up1,
            pre1,
            up2,
            pre2,
            act2,
            output,
        })
    }

    /// Backpropagate an image-space gradient; returns the feature-map
    /// gradient for the shared encoder.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        acts: &DecoderActivations<T>,
        grad_image: &Tensor3<T>,
    ) -> Tensor3<T> {
        let grad_proj = pixel_shuffle_backward(grad_image, SHUFFLE_FACTOR);
        let grad_act2 = self.proj.backward(store, &acts.act2, &grad_proj);
        let grad_pre2 = silu_backward(&acts.pre2, &grad_act2);
        let grad_up2 = self.conv2.backward(store, &acts.up2, &grad_pre2);
        let grad_act1 = upsample2x_backward(&grad_up2);
        let grad_pre1 = silu_backward(&acts.pre1, &grad_act1);
        let grad_up1 = self.conv1.backward(store, &acts.up1, &grad_pre1);
        upsample2x_backward(&grad_up1)
    }
}

fn check_recon_geometry<T: Scalar>(
    original: &ImageBuffer<T>,
    reconstructed: &ImageBuffer<T>,
    mask: &MaskSpec,
) -> Result<()> {
    if original.height != reconstructed.height
        || original.width != reconstructed.width
        || original.channels != reconstructed.channels
    {
        return Err(Error::Geometry(format!(
            "original {}x{}x{} vs reconstruction {}x{}x{}",
            original.channels,
            original.height,
            original.width,
            reconstructed.channels,
            reconstructed.height,
            reconstructed.width
        )));
    }
    mask.check_geometry(original.height, original.width)?;
    if mask.masked_indices.is_empty() {
        return Err(Error::Mask(
            "empty mask: reconstruction loss undefined with no hidden patches".into(),
        ));
    }
    Ok(())
}

/// Mean absolute difference over masked patches only.
pub fn recon_loss<T: Scalar>(
    original: &ImageBuffer<T>,
    reconstructed: &ImageBuffer<T>,
    mask: &MaskSpec,
) -> Result<T> {
    check_recon_geometry(original, reconstructed, mask)?;
    let p = mask.patch_size;
    let mut acc = T::zero();
    for &patch in &mask.masked_indices {
        let py = (patch / mask.grid_cols) * p;
        let px = (patch % mask.grid_cols) * p;
        for c in 0..original.channels {
            for y in py..py + p {
                for x in px..px + p {
                    acc += (original.get(c, y, x) - reconstructed.get(c, y, x)).abs();
                }
            }
        }
    }
    let n = mask.masked_indices.len() * p * p * original.channels;
    Ok(acc / T::from_f64_lossy(n as f64))
}

/// Gradient of [`recon_loss`] with respect to the reconstructed image.
pub fn recon_loss_backward<T: Scalar>(
    original: &ImageBuffer<T>,
    reconstructed: &ImageBuffer<T>,
    mask: &MaskSpec,
) -> Result<Tensor3<T>> {
    check_recon_geometry(original, reconstructed, mask)?;
    let p = mask.patch_size;
    let n = mask.masked_indices.len() * p * p * original.channels;
    let inv = T::from_f64_lossy(1.0 / n as f64);
    let mut grad = Tensor3::zeros(original.channels, original.height, original.width);
    for &patch in &mask.masked_indices {
        let py = (patch / mask.grid_cols) * p;
        let px = (patch % mask.grid_cols) * p;
        for c in 0..original.channels {
            for y in py..py + p {
                for x in px..px + p {
                    let d = reconstructed.get(c, y, x) - original.get(c, y, x);
                    let s = if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    };
                    grad.set(c, y, x, s);
                }
            }
        }
    }
    Ok(grad)
}

/// Decode features and score them against the original in one call.
pub fn reconstruct<T: Scalar>(
    decoder: &ReconDecoder,
    store: &ParamStore<T>,
    features: &FeatureMap<T>,
    original: &ImageBuffer<T>,
    mask: &MaskSpec,
) -> Result<ReconstructionOutput<T>> {
    let image = decoder.decode(store, features, original.height)?;
    let loss_recon = recon_loss(original, &image, mask)?;
    Ok(ReconstructionOutput { image, loss_recon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::generate_mask;
    use crate::nn::gradcheck::{compare_grads, finite_diff_grads, grads_by_name};
    use rand::Rng;

    fn rand_image(channels: usize, size: usize, seed: u64) -> ImageBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(channels, size, size, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn rand_features(channels: usize, side: usize, seed: u64) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * side * side)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor3::from_vec(channels, side, side, data)
    }

    #[test]
    fn decode_upscales_by_32() {
        let mut store = ParamStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 64, 1, 0).unwrap();
        let f = rand_features(64, 16, 1);
        let img = dec.decode(&store, &f, 512).unwrap();
        assert_eq!((img.channels, img.height, img.width), (1, 512, 512));
        assert!(img.is_finite());
    }

    #[test]
    fn decode_rejects_size_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 64, 1, 0).unwrap();
        let f = rand_features(64, 16, 1);
        assert!(dec.decode(&store, &f, 256).is_err());
    }

    #[test]
    fn decode_is_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 8, 1, 3).unwrap();
        let f = rand_features(8, 2, 2);
        let a = dec.decode(&store, &f, 64).unwrap();
        let b = dec.decode(&store, &f, 64).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn identical_images_score_zero() {
        let img = rand_image(1, 64, 4);
        let mask = generate_mask(2, 2, 32, 0.6, 9).unwrap();
        assert_eq!(recon_loss(&img, &img, &mask).unwrap(), 0.0);
    }

    #[test]
    fn constant_difference_gives_unit_loss() {
        let ones = ImageBuffer::<f64>::from_fn(1, 64, 64, |_, _, _| 1.0);
        let zeros = ImageBuffer::<f64>::zeros(1, 64, 64);
        let mask = generate_mask(2, 2, 32, 0.6, 9).unwrap();
        let loss = recon_loss(&ones, &zeros, &mask).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_bruteforce_pixel_loop() {
        let orig = rand_image(1, 96, 11);
        let recon = rand_image(1, 96, 12);
        let mask = generate_mask(3, 3, 32, 0.5, 13).unwrap();
        let got = recon_loss(&orig, &recon, &mask).unwrap();
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in 0..96 {
            for x in 0..96 {
                if mask.covers_pixel(y, x) {
                    acc += (orig.get(0, y, x) - recon.get(0, y, x)).abs();
                    n += 1;
                }
            }
        }
        let want = acc / n as f64;
        assert!((got - want).abs() <= 1e-6 * want.abs());
    }

    #[test]
    fn unmasked_pixels_do_not_affect_loss() {
        let orig = rand_image(1, 64, 14);
        let mut recon = rand_image(1, 64, 15);
        let mask = generate_mask(2, 2, 32, 0.3, 16).unwrap();
        assert_eq!(mask.masked_indices.len(), 1);
        let before = recon_loss(&orig, &recon, &mask).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !mask.covers_pixel(y, x) {
                    recon.set(0, y, x, 0.77);
                }
            }
        }
        let after = recon_loss(&orig, &recon, &mask).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let img = rand_image(1, 64, 17);
        let mut mask = generate_mask(2, 2, 32, 0.3, 18).unwrap();
        mask.masked_indices.clear();
        assert!(recon_loss(&img, &img, &mask).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 8, 1, 21).unwrap();
        let f = rand_features(8, 2, 22);
        let orig = rand_image(1, 64, 23);
        let mask = generate_mask(2, 2, 32, 0.6, 24).unwrap();
        let loss = |store: &ParamStore<f64>| {
            let img = dec.decode(store, &f, 64).unwrap();
            recon_loss(&orig, &img, &mask).unwrap()
        };

        store.zero_grads();
        let acts = dec.forward_cached(&store, &f, 64).unwrap();
        let recon_img = ImageBuffer::from_tensor(&acts.output);
        let grad_img = recon_loss_backward(&orig, &recon_img, &mask).unwrap();
        let grad_features = dec.backward(&mut store, &acts, &grad_img);
        assert!(grad_features.is_finite());

        let ids = dec.param_ids();
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
}
