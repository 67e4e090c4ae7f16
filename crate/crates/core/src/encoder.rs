//! Shared image encoder: one parameter set feeding both the detection and
//! reconstruction branches.
//!
//! The reference encoder is a five-block strided convolutional stack
//! (total stride 32). Both branches hold the same [`ConvEncoder`] and the
//! same parameter store, so weight sharing is structural: there is exactly
//! one array per parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::layers::{silu, silu_backward, Conv2d};
use crate::nn::{ParamId, ParamStore, Tensor3};
use crate::scalar::Scalar;

/// Spatial feature grid produced by an encoder; `rows x cols` equals the
/// input size divided by the encoder stride.
pub type FeatureMap<T> = Tensor3<T>;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Final channel width; internal blocks ramp up through w/4 and w/2.
    pub width: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 64,
            seed: 0,
        }
    }
}

/// Reference convolutional encoder with total stride 32.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    blocks: Vec<Conv2d>,
    pub stride: usize,
    pub out_channels: usize,
    pub in_channels: usize,
}

/// Per-layer activations cached by the training forward pass.
pub struct EncoderActivations<T> {
    /// Input to each block (index 0 is the image itself).
    inputs: Vec<Tensor3<T>>,
    /// Pre-activation output of each block.
    pre: Vec<Tensor3<T>>,
    pub output: Tensor3<T>,
}

impl ConvEncoder {
    /// Build the reference encoder and register its parameters.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &EncoderConfig) -> Result<Self> {
        if config.width < 4 || !config.width.is_multiple_of(4) {
            return Err(Error::config(
                "encoder.width",
                format!("width must be a positive multiple of 4, got {}", config.width),
            ));
        }
        if config.in_channels == 0 {
            return Err(Error::config("encoder.in_channels", "must be at least 1"));
        }
        let w = config.width;
        let widths = [w / 4, w / 2, w, w, w];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            blocks.push(Conv2d::new(
                store,
                &format!("enc.b{i}"),
                c_in,
                c_out,
                3,
                2,
                1,
                &mut rng,
            ));
            c_in = c_out;
        }
        Ok(Self {
            blocks,
            stride: 1 << widths.len(),
            out_channels: w,
            in_channels: config.in_channels,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.weight, b.bias])
            .collect()
    }

    fn check_dims<T: Scalar>(&self, img: &ImageBuffer<T>) -> Result<()> {
        if !img.height.is_multiple_of(self.stride) || !img.width.is_multiple_of(self.stride) {
            return Err(Error::Geometry(format!(
                "image {}x{} not divisible by encoder stride {}",
                img.height, img.width, self.stride
            )));
        }
        if img.channels != self.in_channels {
            return Err(Error::Geometry(format!(
                "image has {} channels, encoder expects {}",
                img.channels, self.in_channels
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        img: &ImageBuffer<T>,
    ) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(store, img)?.output)
    }

    /// Forward pass retaining per-layer activations for backpropagation.
    pub fn forward_cached<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        img: &ImageBuffer<T>,
    ) -> Result<EncoderActivations<T>> {
        self.check_dims(img)?;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut x = img.to_tensor();
        for block in &self.blocks {
            let z = block.forward(store, &x);
            let y = silu(&z);
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        Ok(EncoderActivations {
            inputs,
            pre,
            output: x,
        })
    }

    /// Backpropagate a feature-map gradient; accumulates parameter
    /// gradients and returns the gradient with respect to the input image.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        acts: &EncoderActivations<T>,
        grad_out: &Tensor3<T>,
    ) -> Tensor3<T> {
        let mut grad = grad_out.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let grad_pre = silu_backward(&acts.pre[i], &grad);
            grad = block.backward(store, &acts.inputs[i], &grad_pre);
        }
        grad
    }
}
