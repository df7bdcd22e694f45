//! Pure pixel-level transforms on `[3, H, W]` images with values in `[0, 1]`.
//!
//! Geometric ops sample with bilinear interpolation through an inverse affine
//! map about the image center and fill out-of-bounds reads with mid gray.

use ndarray::{Array2, Array3};

/// Fill value for pixels sampled outside the source image.
pub const FILL: f64 = 0.5;

pub fn clamp01(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Bilinear resize. Identity (same dims) reproduces the input exactly.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let top = img[[ci, y0, x0]] * (1.0 - wx) + img[[ci, y0, x1]] * wx;
                let bot = img[[ci, y1, x0]] * (1.0 - wx) + img[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn crop(img: &Array3<f64>, top: usize, left: usize, ch: usize, cw: usize) -> Array3<f64> {
    img.slice(ndarray::s![.., top..top + ch, left..left + cw]).to_owned()
}

pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = img[[ci, y, w - 1 - x]];
            }
        }
    }
    out
}

/// Rec. 601 luma.
pub fn luma(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] =
                0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
        }
    }
    out
}

pub fn grayscale(img: &Array3<f64>) -> Array3<f64> {
    let lum = luma(img);
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = lum[[y, x]];
            }
        }
    }
    out
}

pub fn brightness(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let mut out = img.mapv(|v| v * factor);
    clamp01(&mut out);
    out
}

/// Blend with the scalar mean luma.
pub fn contrast(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let mean = luma(img).mean().unwrap_or(0.0);
    let mut out = img.mapv(|v| mean + factor * (v - mean));
    clamp01(&mut out);
    out
}

/// Blend with the per-pixel luma (grayscale) image.
pub fn saturation(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let lum = luma(img);
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = lum[[y, x]];
                out[[ci, y, x]] = (g + factor * (img[[ci, y, x]] - g)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d) % 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h.rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotate hue by `delta` as a fraction of the full color circle.
pub fn hue_rotate(img: &Array3<f64>, delta: f64) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let (r, g, b) = hsv_to_rgb(hh + delta, ss, vv);
            out[[0, y, x]] = r.clamp(0.0, 1.0);
            out[[1, y, x]] = g.clamp(0.0, 1.0);
            out[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Separable Gaussian blur with replicate borders; kernel radius `ceil(3σ)`.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    assert!(sigma > 0.0, "gaussian_blur: sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (c, h, w) = img.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * img[[ci, y, sx as usize]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[[ci, sy as usize, x]];
                }
                out[[ci, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Apply the inverse affine map `[a b c; d e f]` (output → input coordinates,
/// relative to the image center) with bilinear sampling.
pub fn affine(img: &Array3<f64>, m: [f64; 6]) -> Array3<f64> {
    // Identity matrices short-circuit so zero-magnitude ops are bit-exact.
    if m == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = m[0] * dx + m[1] * dy + m[2] + cx;
            let sy = m[3] * dx + m[4] * dy + m[5] + cy;
            for ci in 0..c {
                out[[ci, y, x]] = sample_bilinear(img, ci, sy, sx);
            }
        }
    }
    out
}

fn sample_bilinear(img: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let mut acc = 0.0;
    for (dy, fy) in [(0.0, 1.0 - wy), (1.0, wy)] {
        for (dx, fx) in [(0.0, 1.0 - wx), (1.0, wx)] {
            if fy == 0.0 || fx == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            let xx = x0 + dx;
            let v = if yy < 0.0 || yy >= h as f64 || xx < 0.0 || xx >= w as f64 {
                FILL
            } else {
                img[[c, yy as usize, xx as usize]]
            };
            acc += fy * fx * v;
        }
    }
    acc
}

pub fn rotate(img: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let rad = degrees.to_radians();
    let (cos, sin) = (rad.cos(), rad.sin());
    affine(img, [cos, -sin, 0.0, sin, cos, 0.0])
}

pub fn shear_x(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    affine(img, [1.0, factor, 0.0, 0.0, 1.0, 0.0])
}

pub fn shear_y(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    affine(img, [1.0, 0.0, 0.0, factor, 1.0, 0.0])
}

pub fn translate_x(img: &Array3<f64>, pixels: f64) -> Array3<f64> {
    affine(img, [1.0, 0.0, -pixels, 0.0, 1.0, 0.0])
}

pub fn translate_y(img: &Array3<f64>, pixels: f64) -> Array3<f64> {
    affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, -pixels])
}

/// Invert every pixel at or above the threshold.
pub fn solarize(img: &Array3<f64>, threshold: f64) -> Array3<f64> {
    img.mapv(|v| if v >= threshold { 1.0 - v } else { v })
}

/// Keep only the top `bits` bits of the 8-bit quantization.
pub fn posterize(img: &Array3<f64>, bits: u32) -> Array3<f64> {
    assert!((1..=8).contains(&bits), "posterize: bits in 1..=8");
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    img.mapv(|v| {
        let q = (v * 255.0).round().clamp(0.0, 255.0) as u32;
        (q & mask) as f64 / 255.0
    })
}

/// Stretch each channel so its min maps to 0 and its max to 1.
pub fn autocontrast(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = img.clone();
    for ci in 0..c {
        let ch = img.slice(ndarray::s![ci, .., ..]);
        let mn = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx > mn {
            let scale = 1.0 / (mx - mn);
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = ((img[[ci, y, x]] - mn) * scale).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Per-channel histogram equalization on the 8-bit quantization.
pub fn equalize(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let n = (h * w) as f64;
    let mut out = img.clone();
    for ci in 0..c {
        let mut hist = [0u32; 256];
        for y in 0..h {
            for x in 0..w {
                let q = (img[[ci, y, x]] * 255.0).round().clamp(0.0, 255.0) as usize;
                hist[q] += 1;
            }
        }
        let mut cdf = [0f64; 256];
        let mut acc = 0.0;
        for (i, &hv) in hist.iter().enumerate() {
            acc += hv as f64;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().cloned().find(|&v| v > 0.0).unwrap_or(0.0);
        if (n - cdf_min).abs() < f64::EPSILON {
            continue; // constant channel
        }
        let mut lut = [0f64; 256];
        for i in 0..256 {
            lut[i] = ((cdf[i] - cdf_min) / (n - cdf_min) * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        for y in 0..h {
            for x in 0..w {
                let q = (img[[ci, y, x]] * 255.0).round().clamp(0.0, 255.0) as usize;
                out[[ci, y, x]] = lut[q];
            }
        }
    }
    out
}

/// Blend between a 3×3 smoothed copy and the original: factor 1 is identity,
/// below 1 softens, above 1 sharpens.
pub fn sharpness(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let kernel = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let ksum = 13.0;
    let mut smooth = img.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, kv) in row.iter().enumerate() {
                        let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += kv * img[[ci, sy, sx]];
                    }
                }
                smooth[[ci, y, x]] = acc / ksum;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s = smooth[[ci, y, x]];
                out[[ci, y, x]] = (s + factor * (img[[ci, y, x]] - s)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Array3<f64> {
        let mut img = Array3::<f64>::zeros((3, h, w));
        for ci in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img[[ci, y, x]] = ((ci + 1) * (y * w + x)) as f64 / (3 * h * w) as f64;
                }
            }
        }
        img
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = gradient_image(8, 8);
        assert_eq!(resize_bilinear(&img, 8, 8), img);
    }

    #[test]
    fn hflip_is_involution() {
        let img = gradient_image(5, 7);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = gradient_image(6, 6);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(shear_x(&img, 0.0), img);
        assert_eq!(translate_y(&img, 0.0), img);
    }

    #[test]
    fn solarize_threshold_one_is_identity() {
        let img = gradient_image(4, 4);
        let out = solarize(&img, 1.0 + 1e-12);
        assert_eq!(out, img);
    }

    #[test]
    fn posterize_eight_bits_quantizes_only() {
        let img = gradient_image(4, 4);
        let out = posterize(&img, 8);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn enhance_factor_one_is_identity() {
        let img = gradient_image(4, 4);
        assert_eq!(brightness(&img, 1.0), img);
        let c = contrast(&img, 1.0);
        for (a, b) in c.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = saturation(&img, 1.0);
        for (a, b) in s.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_full_circle_roundtrip() {
        let img = gradient_image(4, 4);
        let out = hue_rotate(&img, 1.0);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Array3::<f64>::from_elem((3, 8, 8), 0.42);
        let out = gaussian_blur(&img, 1.3);
        for v in out.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
