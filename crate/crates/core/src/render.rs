//! Visualization emitters: detection overlays, reconstruction triptychs
//! and precision/recall curve SVGs. All rendering is deterministic — the
//! same inputs always produce byte-identical files.

use std::path::Path;

use crate::coco::GroundTruthBox;
use crate::detect::Detection;
use crate::error::Result;
use crate::image::{write_png, ImageBuffer};
use crate::scalar::Scalar;

/// RGB color in unit range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Color(pub f64, pub f64, pub f64);

/// Detections: per-category palette (cycled).
pub const PALETTE: [Color; 6] = [
    Color(1.0, 0.25, 0.25),
    Color(0.25, 0.75, 1.0),
    Color(0.35, 1.0, 0.35),
    Color(1.0, 0.85, 0.2),
    Color(0.9, 0.4, 1.0),
    Color(1.0, 0.6, 0.2),
];

/// Ground truth: single contrasting color.
pub const GT_COLOR: Color = Color(1.0, 1.0, 1.0);

pub fn category_color(category_id: usize) -> Color {
    PALETTE[category_id % PALETTE.len()]
}

/// 5x7 bitmap glyphs for the label charset (digits, upper-case letters
/// and a little punctuation). Rows are the low 5 bits, MSB = left pixel.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Promote grayscale to RGB so colored annotations are visible.
pub fn to_rgb<T: Scalar>(img: &ImageBuffer<T>) -> ImageBuffer<T> {
    if img.channels == 3 {
        return img.clone();
    }
    ImageBuffer::from_fn(3, img.height, img.width, |_, y, x| img.get(0, y, x))
}

fn put<T: Scalar>(img: &mut ImageBuffer<T>, y: i64, x: i64, color: Color) {
    if y < 0 || x < 0 || y as usize >= img.height || x as usize >= img.width {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    img.set(0, y, x, T::from_f64_lossy(color.0));
    img.set(1, y, x, T::from_f64_lossy(color.1));
    img.set(2, y, x, T::from_f64_lossy(color.2));
}

/// Two-pixel-wide rectangle outline.
pub fn draw_rect<T: Scalar>(img: &mut ImageBuffer<T>, bbox: &GroundTruthBox, color: Color) {
    let (x0, y0) = (bbox.x_min.round() as i64, bbox.y_min.round() as i64);
    let (x1, y1) = (bbox.x_max.round() as i64, bbox.y_max.round() as i64);
    for t in 0..2i64 {
        for x in x0..=x1 {
            put(img, y0 + t, x, color);
            put(img, y1 - t, x, color);
        }
        for y in y0..=y1 {
            put(img, y, x0 + t, color);
            put(img, y, x1 - t, color);
        }
    }
}

/// Render `text` with the bitmap font; top-left anchor, 1px letter gap.
pub fn draw_text<T: Scalar>(img: &mut ImageBuffer<T>, y: i64, x: i64, text: &str, color: Color) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5i64 {
                if row >> (4 - dx) & 1 == 1 {
                    put(img, y + dy as i64, cx + dx, color);
                }
            }
        }
        cx += 6;
    }
}

/// Overlay detections (colored per category, labeled `NAME 0.87`) and
/// optional ground truth (white, no score) onto a copy of `img`.
pub fn render_overlay<T: Scalar>(
    img: &ImageBuffer<T>,
    detections: &[Detection],
    ground_truth: Option<&[GroundTruthBox]>,
    category_names: &[String],
) -> ImageBuffer<T> {
    let mut out = to_rgb(img);
    if let Some(gts) = ground_truth {
        for gt in gts {
            draw_rect(&mut out, gt, GT_COLOR);
        }
    }
    for det in detections {
        let color = category_color(det.category_id());
        draw_rect(&mut out, &det.bbox, color);
        let name = category_names
            .get(det.category_id())
            .map(String::as_str)
            .unwrap_or("?");
        let label = format!("{} {:.2}", name, det.score);
        // Put the label above the box when it fits, else just inside.
        let ty = det.bbox.y_min.round() as i64 - 9;
        let ty = if ty < 0 { det.bbox.y_min.round() as i64 + 3 } else { ty };
        draw_text(&mut out, ty, det.bbox.x_min.round() as i64, &label, color);
    }
    out
}

/// Horizontal concatenation with a 2px separator column.
pub fn hstack<T: Scalar>(panels: &[&ImageBuffer<T>]) -> ImageBuffer<T> {
    assert!(!panels.is_empty());
    let h = panels[0].height;
    let c = panels.iter().map(|p| p.channels).max().unwrap();
    let sep = 2usize;
    let w: usize = panels.iter().map(|p| p.width).sum::<usize>() + sep * (panels.len() - 1);
    let mut out = ImageBuffer::zeros(c, h, w);
    let mut x0 = 0usize;
    for (i, p) in panels.iter().enumerate() {
        assert_eq!(p.height, h, "triptych panels must share a height");
        for y in 0..h {
            for x in 0..p.width {
                for ch in 0..c {
                    let v = if p.channels == c { p.get(ch, y, x) } else { p.get(0, y, x) };
                    out.set(ch, y, x0 + x, v);
                }
            }
        }
        x0 += p.width;
        if i + 1 < panels.len() {
            for y in 0..h {
                for dx in 0..sep {
                    for ch in 0..c {
                        out.set(ch, y, x0 + dx, T::from_f64_lossy(0.5));
                    }
                }
            }
            x0 += sep;
        }
    }
    out
}

/// Write the (input | masked | reconstruction) triptych as one PNG.
pub fn write_triptych<T: Scalar>(
    input: &ImageBuffer<T>,
    masked: &ImageBuffer<T>,
    reconstruction: &ImageBuffer<T>,
    path: &Path,
) -> Result<()> {
    let mut recon = reconstruction.clone();
    recon.clamp_unit();
    let stacked = hstack(&[input, masked, &recon]);
    write_png(&stacked, path)
}

/// Minimal SVG polyline plot of a precision/recall curve (unit square,
/// fixed 320x320 canvas with axes).
pub fn pr_curve_svg(points: &[(f64, f64)], title: &str) -> String {
    let (w, h, m) = (320.0, 320.0, 28.0);
    let sx = |r: f64| m + r.clamp(0.0, 1.0) * (w - 2.0 * m);
    let sy = |p: f64| h - m - p.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut path = String::new();
    for (i, &(r, p)) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        path.push_str(&format!("{cmd}{:.2},{:.2} ", sx(r), sy(p)));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{m}\" y2=\"{m}\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"{h}\" font-size=\"10\" text-anchor=\"middle\">recall</text>\n",
            "<text x=\"8\" y=\"{ymid}\" font-size=\"10\" text-anchor=\"middle\" ",
            "transform=\"rotate(-90 8 {ymid})\">precision</text>\n",
            "<text x=\"{xmid}\" y=\"14\" font-size=\"11\" text-anchor=\"middle\">{title}</text>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#c03030\" stroke-width=\"1.5\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        ybase = h - m,
        xmax = w - m,
        xmid = w / 2.0,
        ymid = h / 2.0,
        title = title,
        path = path.trim_end(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_marks_border_only() {
        let mut img: ImageBuffer<f64> = ImageBuffer::zeros(3, 32, 32);
        let b = GroundTruthBox::new(4.0, 4.0, 20.0, 20.0, 0).unwrap();
        draw_rect(&mut img, &b, Color(1.0, 0.0, 0.0));
        assert_eq!(img.get(0, 4, 10), 1.0);
        assert_eq!(img.get(0, 20, 10), 1.0);
        assert_eq!(img.get(0, 12, 4), 1.0);
        // Interior untouched.
        assert_eq!(img.get(0, 12, 12), 0.0);
        // Green/blue channels stay dark on the border.
        assert_eq!(img.get(1, 4, 10), 0.0);
    }

    #[test]
    fn text_fits_expected_columns() {
        let mut img: ImageBuffer<f64> = ImageBuffer::zeros(3, 16, 64);
        draw_text(&mut img, 2, 2, "AB", Color(1.0, 1.0, 1.0));
        let lit: usize = (0..16)
            .flat_map(|y| (0..64).map(move |x| (y, x)))
            .filter(|&(y, x)| img.get(0, y, x) > 0.5)
            .count();
        assert!(lit > 10);
        // Nothing beyond two glyph cells (2 + 2*6 columns).
        for y in 0..16 {
            for x in 14..64 {
                assert_eq!(img.get(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn hstack_width_and_separator() {
        let a: ImageBuffer<f64> = ImageBuffer::zeros(1, 8, 8);
        let b: ImageBuffer<f64> = ImageBuffer::zeros(1, 8, 6);
        let out = hstack(&[&a, &b]);
        assert_eq!((out.height, out.width, out.channels), (8, 16, 1));
        assert_eq!(out.get(0, 3, 8), 0.5);
        assert_eq!(out.get(0, 3, 9), 0.5);
    }

    #[test]
    fn overlay_is_deterministic_and_preserves_unannotated_copy() {
        let img: ImageBuffer<f64> = ImageBuffer::from_fn(1, 24, 24, |_, y, x| {
            ((y * 31 + x * 17) % 9) as f64 / 9.0
        });
        let names = vec!["cat0".to_string()];
        let empty = render_overlay(&img, &[], None, &names);
        // No detections: the copy matches the grayscale promotion exactly.
        assert_eq!(empty.data(), to_rgb(&img).data());

        let det = Detection {
            bbox: GroundTruthBox::new(3.0, 3.0, 15.0, 15.0, 0).unwrap(),
            score: 0.75,
        };
        let once = render_overlay(&img, std::slice::from_ref(&det), None, &names);
        let twice = render_overlay(&img, &[det], None, &names);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn svg_contains_polyline_and_title() {
        let svg = pr_curve_svg(&[(0.0, 1.0), (0.5, 0.8), (1.0, 0.2)], "cat0 AP50");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("cat0 AP50"));
        assert!(svg.contains("M28.00"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
