//! Dense image buffers and the resize stage of the pipeline.
//!
//! Images are channel-major `[C][H][W]`, values normalized to `[0, 1]`.

use std::path::Path;

use crate::coco::AnnotationRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 2-D image with a channel dimension; the unit of all pipeline I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageBuffer<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "degenerate image dims");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// Build from a per-pixel closure returning values in `[0, 1]`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut img = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// One contiguous `[H][W]` plane.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// All values inside the normalized range (with no tolerance).
    pub fn in_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// Convert the scalar type (exact when widening f32 -> f64).
    pub fn cast<U: Scalar>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// View as a dense tensor (same channel-major layout).
    pub fn to_tensor(&self) -> crate::nn::Tensor3<T> {
        crate::nn::Tensor3::from_vec(self.channels, self.height, self.width, self.data.clone())
    }

    /// Wrap tensor data back into an image buffer.
    pub fn from_tensor(t: &crate::nn::Tensor3<T>) -> Self {
        ImageBuffer {
            height: t.height,
            width: t.width,
            channels: t.channels,
            data: t.data().to_vec(),
        }
    }
}

/// Bilinear resize to `out_h x out_w` (half-pixel centers, edge clamped).
pub fn resize_bilinear<T: Scalar>(img: &ImageBuffer<T>, out_h: usize, out_w: usize) -> ImageBuffer<T> {
    assert!(out_h > 0 && out_w > 0);
    let (in_h, in_w) = (img.height, img.width);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut out = ImageBuffer::zeros(img.channels, out_h, out_w);
    for c in 0..img.channels {
        let src = img.plane(c);
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(in_h - 1);
            let y1 = (y0 + 1).min(in_h - 1);
            let wy = T::from_f64_lossy(fy - y0 as f64);
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(in_w - 1);
                let x1 = (x0 + 1).min(in_w - 1);
                let wx = T::from_f64_lossy(fx - x0 as f64);
                let one = T::one();
                let v00 = src[y0 * in_w + x0];
                let v01 = src[y0 * in_w + x1];
                let v10 = src[y1 * in_w + x0];
                let v11 = src[y1 * in_w + x1];
                let top = v00 * (one - wx) + v01 * wx;
                let bot = v10 * (one - wx) + v11 * wx;
                out.set(c, oy, ox, top * (one - wy) + bot * wy);
            }
        }
    }
    out
}

/// Resize an image to `target x target` and rescale its boxes per axis.
///
/// Non-square inputs are resized anisotropically; box coordinates are scaled
/// by `target/width` and `target/height` independently.
pub fn resize_with_boxes<T: Scalar>(
    img: &ImageBuffer<T>,
    record: &AnnotationRecord,
    target: usize,
    patch_size: usize,
) -> Result<(ImageBuffer<T>, AnnotationRecord)> {
    if patch_size == 0 || !target.is_multiple_of(patch_size) {
        return Err(Error::Geometry(format!(
            "target {target} not divisible by patch size {patch_size}"
        )));
    }
    let out = if img.height == target && img.width == target {
        img.clone()
    } else {
        resize_bilinear(img, target, target)
    };
    let sx = target as f64 / img.width as f64;
    let sy = target as f64 / img.height as f64;
    let mut scaled = record.clone();
    for b in &mut scaled.boxes {
        b.x_min = (b.x_min * sx).clamp(0.0, target as f64);
        b.x_max = (b.x_max * sx).clamp(0.0, target as f64);
        b.y_min = (b.y_min * sy).clamp(0.0, target as f64);
        b.y_max = (b.y_max * sy).clamp(0.0, target as f64);
    }
    Ok((out, scaled))
}

/// Mirror an image and its boxes around the vertical axis.
pub fn horizontal_flip<T: Scalar>(
    img: &ImageBuffer<T>,
    record: &AnnotationRecord,
) -> (ImageBuffer<T>, AnnotationRecord) {
    let mut out = img.clone();
    let w = img.width;
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    let mut rec = record.clone();
    let fw = w as f64;
    for b in &mut rec.boxes {
        let (x0, x1) = (b.x_min, b.x_max);
        b.x_min = fw - x1;
        b.x_max = fw - x0;
    }
    (out, rec)
}

/// Decode a PNG/JPEG file into a normalized buffer (grayscale stays 1-channel).
pub fn read_image<T: Scalar>(path: &Path) -> Result<ImageBuffer<T>> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let inv = T::from_f64_lossy(1.0 / 255.0);
    Ok(match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuffer::from_fn(1, h, w, |_, y, x| {
                T::from_f64_lossy(g.get_pixel(x as u32, y as u32)[0] as f64) * inv
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            ImageBuffer::from_fn(3, h, w, |c, y, x| {
                T::from_f64_lossy(rgb.get_pixel(x as u32, y as u32)[c] as f64) * inv
            })
        }
    })
}

/// Encode to PNG; Luma8 for 1 channel, Rgb8 for 3.
pub fn write_png<T: Scalar>(img: &ImageBuffer<T>, path: &Path) -> Result<()> {
    let to_byte = |v: T| {
        let f = v.to_f64_lossy().clamp(0.0, 1.0);
        (f * 255.0).round() as u8
    };
    let (w, h) = (img.width as u32, img.height as u32);
    let res = if img.channels == 1 {
        let buf = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([to_byte(img.get(0, y as usize, x as usize))])
        });
        buf.save(path)
    } else {
        let buf = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([
                to_byte(img.get(0, y as usize, x as usize)),
                to_byte(img.get(1, y as usize, x as usize)),
                to_byte(img.get(2, y as usize, x as usize)),
            ])
        });
        buf.save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::{AnnotationRecord, GroundTruthBox, TaskKind};

    fn record_with(boxes: Vec<GroundTruthBox>) -> AnnotationRecord {
        AnnotationRecord {
            image_id: 1,
            file_name: String::new(),
            boxes,
            task: TaskKind::Disease,
        }
    }

    fn gradient_image(h: usize, w: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(1, h, w, |_, y, x| {
            (y * w + x) as f64 / (h * w) as f64
        })
    }

    #[test]
    fn identity_resize_is_bitwise_identity() {
        let img = gradient_image(32, 32);
        let rec = record_with(vec![GroundTruthBox::new(3.0, 4.0, 10.0, 12.0, 0).unwrap()]);
        let (out, orec) = resize_with_boxes(&img, &rec, 32, 8).unwrap();
        assert_eq!(out, img);
        assert_eq!(orec.boxes[0].x_min, 3.0);
        assert_eq!(orec.boxes[0].y_max, 12.0);
    }

    #[test]
    fn box_scaling_matches_linear_oracle() {
        // 1024 -> 512 halves every coordinate.
        let img = gradient_image(1024, 1024);
        let rec = record_with(vec![GroundTruthBox::new(100.0, 100.0, 200.0, 200.0, 0).unwrap()]);
        let (_, orec) = resize_with_boxes(&img, &rec, 512, 32).unwrap();
        let b = &orec.boxes[0];
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (50.0, 50.0, 100.0, 100.0));
    }

    #[test]
    fn non_square_axes_scale_independently() {
        let img = gradient_image(500, 1000); // h=500, w=1000
        let rec = record_with(vec![GroundTruthBox::new(100.0, 50.0, 600.0, 400.0, 0).unwrap()]);
        let (out, orec) = resize_with_boxes(&img, &rec, 512, 32).unwrap();
        assert_eq!((out.height, out.width), (512, 512));
        let b = &orec.boxes[0];
        let (sx, sy) = (512.0 / 1000.0, 512.0 / 500.0);
        assert!((b.x_min - 100.0 * sx).abs() < 1e-12);
        assert!((b.x_max - 600.0 * sx).abs() < 1e-12);
        assert!((b.y_min - 50.0 * sy).abs() < 1e-12);
        assert!((b.y_max - 400.0 * sy).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_bad_patch_alignment() {
        let img = gradient_image(64, 64);
        let rec = record_with(vec![]);
        assert!(resize_with_boxes(&img, &rec, 100, 32).is_err());
    }

    #[test]
    fn box_center_scales_linearly() {
        // Center of the scaled box equals the scaled center.
        let img = gradient_image(300, 700);
        let b = GroundTruthBox::new(31.0, 17.0, 220.0, 140.0, 0).unwrap();
        let rec = record_with(vec![b]);
        let (_, orec) = resize_with_boxes(&img, &rec, 512, 32).unwrap();
        let s = &orec.boxes[0];
        let (sx, sy) = (512.0 / 700.0, 512.0 / 300.0);
        let scaled_center = ((b.x_min + b.x_max) / 2.0 * sx, (b.y_min + b.y_max) / 2.0 * sy);
        let center_of_scaled = ((s.x_min + s.x_max) / 2.0, (s.y_min + s.y_max) / 2.0);
        assert!((scaled_center.0 - center_of_scaled.0).abs() < 1e-9);
        assert!((scaled_center.1 - center_of_scaled.1).abs() < 1e-9);
    }

    #[test]
    fn bilinear_downsample_averages_blocks() {
        // A 2x2 checkerboard downsampled to 1x1 lands on the mean.
        let mut img = ImageBuffer::<f64>::zeros(1, 2, 2);
        img.set(0, 0, 0, 1.0);
        img.set(0, 1, 1, 1.0);
        let out = resize_bilinear(&img, 1, 1);
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flip_mirrors_pixels_and_boxes() {
        let img = gradient_image(4, 8);
        let rec = record_with(vec![GroundTruthBox::new(1.0, 0.0, 3.0, 2.0, 0).unwrap()]);
        let (fimg, frec) = horizontal_flip(&img, &rec);
        assert_eq!(fimg.get(0, 2, 0), img.get(0, 2, 7));
        assert_eq!(frec.boxes[0].x_min, 5.0);
        assert_eq!(frec.boxes[0].x_max, 7.0);
        // Involution.
        let (fimg2, frec2) = horizontal_flip(&fimg, &frec);
        assert_eq!(fimg2, img);
        assert_eq!(frec2.boxes[0].x_min, rec.boxes[0].x_min);
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(16, 16);
        write_png(&img, &path).unwrap();
        let back: ImageBuffer<f64> = read_image(&path).unwrap();
        assert_eq!((back.channels, back.height, back.width), (1, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let expect = (img.get(0, y, x) * 255.0).round() / 255.0;
                assert!((back.get(0, y, x) - expect).abs() < 1e-9);
            }
        }
    }
}
