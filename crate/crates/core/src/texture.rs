//! Texture-consistency loss between frozen-extractor embeddings of the
//! original image and its reconstruction.
//!
//! Two terms: alignment = 1 - cosine similarity (direction), gather =
//! absolute difference of Euclidean norms (magnitude). Gradients flow only
//! into the reconstruction, never into the extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, silu, silu_backward, Conv2d};
use crate::nn::{ParamStore, Tensor3};
use crate::scalar::Scalar;

/// Fixed-length image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values
            .iter()
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fixed-parameter embedding network. Implementations must keep their
/// parameters constant forever; gradients flow only to the input image.
pub trait FrozenExtractor<T: Scalar> {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageBuffer<T>) -> Result<EmbeddingVector<T>>;
    /// Chain an embedding gradient back to image pixels.
    fn extract_backward(&self, img: &ImageBuffer<T>, grad_embedding: &[T]) -> Result<Tensor3<T>>;
    /// Stable digest of all frozen parameters, for frozen-contract tests.
    fn param_fingerprint(&self) -> Vec<f64>;
}

/// Small frozen convolutional extractor (randomly initialized, fixed
/// seed): three stride-4 conv blocks and a global average pool.
pub struct ToyTextureExtractor<T> {
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    in_channels: usize,
    dim: usize,
}

const TOY_MIN_INPUT: usize = 64;

impl<T: Scalar> ToyTextureExtractor<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [8usize, 16, 32];
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &format!("tex.b{i}"),
                c_in,
                c_out,
                4,
                4,
                0,
                &mut rng,
            ));
            c_in = c_out;
        }
        Self {
            store,
            convs,
            in_channels,
            dim: *widths.last().unwrap(),
        }
    }

    fn check_input(&self, img: &ImageBuffer<T>) -> Result<()> {
        if img.channels != self.in_channels {
            return Err(Error::Geometry(format!(
                "extractor expects {} channels, got {}",
                self.in_channels, img.channels
            )));
        }
        if img.height < TOY_MIN_INPUT || img.width < TOY_MIN_INPUT {
            return Err(Error::Geometry(format!(
                "extractor needs inputs of at least {TOY_MIN_INPUT} px, got {}x{}",
                img.height, img.width
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, img: &ImageBuffer<T>) -> (Vec<Tensor3<T>>, Vec<Tensor3<T>>, Vec<T>) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut x = img.to_tensor();
        for conv in &self.convs {
            let z = conv.forward(&self.store, &x);
            let y = silu(&z);
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        let pooled = global_avg_pool(&x);
        inputs.push(x);
        (inputs, pre, pooled)
    }
}

impl<T: Scalar> FrozenExtractor<T> for ToyTextureExtractor<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &ImageBuffer<T>) -> Result<EmbeddingVector<T>> {
        self.check_input(img)?;
        let (_, _, pooled) = self.forward_cached(img);
        Ok(EmbeddingVector::new(pooled))
    }

    fn extract_backward(&self, img: &ImageBuffer<T>, grad_embedding: &[T]) -> Result<Tensor3<T>> {
        self.check_input(img)?;
        let (inputs, pre, _) = self.forward_cached(img);
        let last = inputs.last().unwrap();
        let mut grad = global_avg_pool_backward(grad_embedding, last.channels, last.height, last.width);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let grad_pre = silu_backward(&pre[i], &grad);
            grad = conv.backward_input_only(&self.store, inputs[i].height, inputs[i].width, &grad_pre);
        }
        Ok(grad)
    }

    fn param_fingerprint(&self) -> Vec<f64> {
        let ids: Vec<_> = self.store.ids().collect();
        ids.iter()
            .flat_map(|&id| self.store.value(id).iter().map(|v| v.to_f64_lossy()))
            .collect()
    }
}

/// Names accepted by [`create_extractor`]. Only `toy` ships with weights;
/// the heavyweight entries are adapter slots for externally provided
/// implementations.
pub fn extractor_names() -> &'static [&'static str] {
    &["toy", "sam", "clip", "medsam"]
}

pub fn create_extractor<T: Scalar>(
    name: &str,
    in_channels: usize,
    seed: u64,
) -> Result<Box<dyn FrozenExtractor<T>>> {
    match name {
        "toy" => Ok(Box::new(ToyTextureExtractor::new(in_channels, seed))),
        "sam" | "clip" | "medsam" => Err(Error::ExtractorUnavailable {
            name: name.to_string(),
            reason: "pretrained weights are not bundled; plug in a FrozenExtractor implementation"
                .to_string(),
        }),
        other => Err(Error::UnknownExtractor {
            name: other.to_string(),
            known: extractor_names().join(", "),
        }),
    }
}

/// How the gather term treats its inputs. The `L2Normalized` reading
/// forces both norms to 1 and therefore a constant zero loss; it exists
/// for auditability, not for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatherNormalization {
    #[default]
    Raw,
    L2Normalized,
}

fn check_pair<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Loss(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Alignment term: `1 - cos(vd, vr)`, in [0, 2].
pub fn feature_alignment_loss<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
) -> Result<T> {
    check_pair(vd, vr)?;
    let (na, nb) = (vd.norm(), vr.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Loss(
            "cosine alignment undefined for a zero embedding".into(),
        ));
    }
    Ok(T::one() - dot(&vd.values, &vr.values) / (na * nb))
}

/// Gather term: absolute difference of Euclidean norms.
pub fn feature_gather_loss<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
) -> Result<T> {
    feature_gather_loss_with(vd, vr, GatherNormalization::Raw)
}

pub fn feature_gather_loss_with<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
    mode: GatherNormalization,
) -> Result<T> {
    check_pair(vd, vr)?;
    match mode {
        GatherNormalization::Raw => Ok((vd.norm() - vr.norm()).abs()),
        GatherNormalization::L2Normalized => {
            // Unit vectors by construction: the difference of norms is 0
            // whenever both embeddings are nonzero.
            if vd.norm() == T::zero() || vr.norm() == T::zero() {
                return Err(Error::Loss(
                    "cannot L2-normalize a zero embedding".into(),
                ));
            }
            Ok(T::zero())
        }
    }
}

/// Combined texture-consistency loss: `(total, align, gather)` with
/// `total = align + gather`.
pub fn tc_loss<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
) -> Result<(T, T, T)> {
    tc_loss_with(vd, vr, GatherNormalization::Raw)
}

pub fn tc_loss_with<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
    mode: GatherNormalization,
) -> Result<(T, T, T)> {
    let align = feature_alignment_loss(vd, vr)?;
    let gather = feature_gather_loss_with(vd, vr, mode)?;
    Ok((align + gather, align, gather))
}

/// Gradient of `align + gather` with respect to `vr` (`vd` is a constant:
/// it embeds the untouched original image).
pub fn tc_loss_backward<T: Scalar>(
    vd: &EmbeddingVector<T>,
    vr: &EmbeddingVector<T>,
    mode: GatherNormalization,
) -> Result<Vec<T>> {
    check_pair(vd, vr)?;
    let (na, nb) = (vd.norm(), vr.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Loss(
            "texture-consistency gradient undefined for a zero embedding".into(),
        ));
    }
    let d = dot(&vd.values, &vr.values);
    let inv_ab = T::one() / (na * nb);
    let cos_over_b2 = d * inv_ab / (nb * nb);
    // d(-cos)/dvr_i = -(vd_i/(|a||b|) - cos * vr_i/|b|^2)
    let mut grad: Vec<T> = vd
        .values
        .iter()
        .zip(&vr.values)
        .map(|(&a, &b)| -(a * inv_ab - b * cos_over_b2))
        .collect();
    if mode == GatherNormalization::Raw {
        // d|na - nb|/dvr_i = -sign(na - nb) * vr_i/|b|
        let diff = na - nb;
        let sign = if diff > T::zero() {
            T::one()
        } else if diff < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        for (g, &b) in grad.iter_mut().zip(&vr.values) {
            *g -= sign * b / nb;
        }
    }
    Ok(grad)
}
