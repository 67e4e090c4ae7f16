//! Differentiable layers with explicit forward/backward passes.
//!
//! No tape: each branch wires its own backward chain, which keeps the
//! gradient flow auditable against finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor3;
use crate::scalar::Scalar;

/// 2-D convolution; weight layout `[c_out][c_in][k][k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Register a conv layer with He-normal weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = c_out * c_in * kernel * kernel;
        let weights: Vec<T> = (0..n)
            .map(|_| T::from_f64_lossy(gaussian(rng) * std))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            vec![c_out, c_in, kernel, kernel],
            weights,
        );
        let bias = store.add(format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out]);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output-x range for kernel column `kx` on input width `w`:
    /// indices where `ox*stride + kx - padding` lands inside the row.
    #[inline]
    fn ox_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let lo = if kx < self.padding {
            // ox*s >= padding - kx
            (self.padding - kx).div_ceil(self.stride)
        } else {
            0
        };
        // ox*s <= w - 1 + padding - kx
        let max_in = w + self.padding;
        if max_in <= kx {
            return (1, 0); // empty
        }
        let hi = ((max_in - 1 - kx) / self.stride + 1).min(ow);
        (lo, hi)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor3<T>) -> Tensor3<T> {
        debug_assert_eq!(x.channels, self.c_in);
        let (oh, ow) = self.out_size(x.height, x.width);
        let weight = store.value(self.weight);
        let bias = store.value(self.bias);
        let mut out = Tensor3::zeros(self.c_out, oh, ow);
        let k = self.kernel;
        #[allow(clippy::needless_range_loop)]
        for co in 0..self.c_out {
            out.plane_mut(co).iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..self.c_in {
                let w_base = ((co * self.c_in + ci) * k) * k;
                for ky in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= x.height {
                            continue;
                        }
                        let in_row = x.row(ci, iy as usize);
                        let out_start = (co * oh + oy) * ow;
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let (lo, hi) = self.ox_range(kx, x.width, ow);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - self.padding as isize;
                            let out_row = &mut out.data_mut()[out_start + lo..out_start + hi];
                            let mut ix = (lo * self.stride) as isize + shift;
                            for o in out_row.iter_mut() {
                                *o += wv * in_row[ix as usize];
                                ix += self.stride as isize;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward pass: returns the input gradient and accumulates parameter
    /// gradients into the store.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor3<T>,
        grad_out: &Tensor3<T>,
    ) -> Tensor3<T> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let k = self.kernel;
        let mut grad_in = Tensor3::zeros(self.c_in, x.height, x.width);

        // Bias gradient.
        {
            let gb = store.grad_mut(self.bias);
            #[allow(clippy::needless_range_loop)]
            for co in 0..self.c_out {
                gb[co] += grad_out.plane(co).iter().copied().sum::<T>();
            }
        }

        // Weight gradient and input gradient share the same tap geometry.
        let weight: Vec<T> = store.value(self.weight).to_vec();
        let gw = store.grad_mut(self.weight);
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let w_base = ((co * self.c_in + ci) * k) * k;
                for ky in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= x.height {
                            continue;
                        }
                        let iy = iy as usize;
                        let g_row = grad_out.row(co, oy);
                        let in_row = x.row(ci, iy);
                        for kx in 0..k {
                            let (lo, hi) = self.ox_range(kx, x.width, ow);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - self.padding as isize;
                            // dL/dw = sum over outputs of g * x
                            let mut acc = T::zero();
                            let mut ix = (lo * self.stride) as isize + shift;
                            for &g in &g_row[lo..hi] {
                                acc += g * in_row[ix as usize];
                                ix += self.stride as isize;
                            }
                            gw[w_base + ky * k + kx] += acc;

                            // dL/dx scatter with the same taps.
                            let wv = weight[w_base + ky * k + kx];
                            let gi_start = (ci * x.height + iy) * x.width;
                            let gi = grad_in.data_mut();
                            let mut ix = (lo * self.stride) as isize + shift;
                            for &g in &g_row[lo..hi] {
                                gi[gi_start + ix as usize] += wv * g;
                                ix += self.stride as isize;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Input gradient only, leaving parameter gradients untouched (frozen
/// layers). Needs just the input geometry, not the input values.
impl Conv2d {
    pub fn backward_input_only<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        in_h: usize,
        in_w: usize,
        grad_out: &Tensor3<T>,
    ) -> Tensor3<T> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let k = self.kernel;
        let weight = store.value(self.weight);
        let mut grad_in = Tensor3::zeros(self.c_in, in_h, in_w);
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let w_base = ((co * self.c_in + ci) * k) * k;
                for ky in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= in_h {
                            continue;
                        }
                        let g_row_start = (co * oh + oy) * ow;
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let (lo, hi) = self.ox_range(kx, in_w, ow);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - self.padding as isize;
                            let gi_start = (ci * in_h + iy as usize) * in_w;
                            let mut ix = (lo * self.stride) as isize + shift;
                            for o in lo..hi {
                                let g = grad_out.data()[g_row_start + o];
                                grad_in.data_mut()[gi_start + ix as usize] += wv * g;
                                ix += self.stride as isize;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Box-Muller gaussian draw.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// SiLU activation `x * sigmoid(x)`; smooth, so finite-difference gradient
/// checks are stable.
pub fn silu<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = *v * sigmoid(*v);
    }
    out
}

/// `d silu/dx = s(x) * (1 + x * (1 - s(x)))`, evaluated from the cached
/// pre-activation.
pub fn silu_backward<T: Scalar>(pre: &Tensor3<T>, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let mut grad = grad_out.clone();
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        let s = sigmoid(z);
        *g *= s * (T::one() + z * (T::one() - s));
    }
    grad
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2x<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = Tensor3::zeros(x.channels, x.height * 2, x.width * 2);
    for c in 0..x.channels {
        for y in 0..x.height {
            let in_row = x.row(c, y);
            for dy in 0..2 {
                let out_row = out.row_mut(c, y * 2 + dy);
                for (xx, &v) in in_row.iter().enumerate() {
                    out_row[xx * 2] = v;
                    out_row[xx * 2 + 1] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut grad = Tensor3::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += grad_out.get(c, y * 2 + dy, x * 2 + dx);
                    }
                }
                grad.set(c, y, x, acc);
            }
        }
    }
    grad
}

/// Rearrange `[C*r^2, H, W]` into `[C, H*r, W*r]` (sub-pixel upsample).
pub fn pixel_shuffle<T: Scalar>(x: &Tensor3<T>, r: usize) -> Tensor3<T> {
    let c_out = x.channels / (r * r);
    assert_eq!(c_out * r * r, x.channels, "channels not divisible by r^2");
    let mut out = Tensor3::zeros(c_out, x.height * r, x.width * r);
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let src_c = (c * r + dy) * r + dx;
                for y in 0..x.height {
                    let in_row = x.row(src_c, y);
                    let out_row = out.row_mut(c, y * r + dy);
                    for (xx, &v) in in_row.iter().enumerate() {
                        out_row[xx * r + dx] = v;
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<T: Scalar>(grad_out: &Tensor3<T>, r: usize) -> Tensor3<T> {
    let c_in = grad_out.channels * r * r;
    let (h, w) = (grad_out.height / r, grad_out.width / r);
    let mut grad = Tensor3::zeros(c_in, h, w);
    for c in 0..grad_out.channels {
        for dy in 0..r {
            for dx in 0..r {
                let src_c = (c * r + dy) * r + dx;
                for y in 0..h {
                    let out_row = grad_out.row(c, y * r + dy);
                    let in_row = grad.row_mut(src_c, y);
                    for (xx, g) in in_row.iter_mut().enumerate() {
                        *g = out_row[xx * r + dx];
                    }
                }
            }
        }
    }
    grad
}

/// Spatial mean per channel.
pub fn global_avg_pool<T: Scalar>(x: &Tensor3<T>) -> Vec<T> {
    let inv = T::from_f64_lossy(1.0 / (x.height * x.width) as f64);
    (0..x.channels)
        .map(|c| x.plane(c).iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &[T],
    channels: usize,
    height: usize,
    width: usize,
) -> Tensor3<T> {
    let inv = T::from_f64_lossy(1.0 / (height * width) as f64);
    let mut grad = Tensor3::zeros(channels, height, width);
    #[allow(clippy::needless_range_loop)]
    for c in 0..channels {
        let g = grad_out[c] * inv;
        grad.plane_mut(c).iter_mut().for_each(|v| *v = g);
    }
    grad
}
