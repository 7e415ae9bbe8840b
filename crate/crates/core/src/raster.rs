//! Plain image containers and the sampling/IO helpers shared by every stage.
//!
//! Grayscale planes are `Array2<f32>` indexed `[row, col]`; colour images are
//! channel-first `Array3<f32>` shaped `(3, H, W)`. Values live in `[0, 1]`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub type Gray = Array2<f32>;
pub type Rgb = Array3<f32>;

pub fn dims(img: &Gray) -> (usize, usize) {
    img.dim()
}

/// Bilinear lookup at fractional `(row, col)`; `None` outside the pixel grid.
pub fn bilinear(img: ArrayView2<f32>, row: f64, col: f64) -> Option<f32> {
    let (h, w) = img.dim();
    if !(row >= 0.0 && col >= 0.0 && row <= (h - 1) as f64 && col <= (w - 1) as f64) {
        return None;
    }
    let r0 = row.floor() as usize;
    let c0 = col.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = (row - r0 as f64) as f32;
    let fc = (col - c0 as f64) as f32;
    if fr == 0.0 && fc == 0.0 {
        return Some(img[[r0, c0]]);
    }
    let top = img[[r0, c0]] * (1.0 - fc) + img[[r0, c1]] * fc;
    let bottom = img[[r1, c0]] * (1.0 - fc) + img[[r1, c1]] * fc;
    Some(top * (1.0 - fr) + bottom * fr)
}

/// Nearest-edge lookup with replication at the border.
#[inline]
pub fn at_clamped(img: ArrayView2<f32>, row: isize, col: isize) -> f32 {
    let (h, w) = img.dim();
    let r = row.clamp(0, h as isize - 1) as usize;
    let c = col.clamp(0, w as isize - 1) as usize;
    img[[r, c]]
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` returns a copy.
pub fn gaussian_blur(img: &Gray, sigma: f64) -> Gray {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let view = img.view();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * at_clamped(view, r as isize, c as isize + i as isize - radius);
            }
            tmp[[r, c]] = acc;
        }
    }
    let tv = tmp.view();
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * at_clamped(tv, r as isize + i as isize - radius, c as isize);
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Exact area-weighted resampling to `(out_h, out_w)`: every output cell is the
/// mean of the input region it covers, fractional pixels weighted by overlap.
pub fn area_resize(img: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let mut v = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let a = lo.max(i as f64);
                    let b = hi.min((i + 1) as f64);
                    if b > a {
                        v.push((i, (b - a) / scale));
                    }
                    i += 1;
                }
                v
            })
            .collect()
    };
    let wr = weights(h, out_h);
    let wc = weights(w, out_w);
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (orow, rows) in wr.iter().enumerate() {
        for (ocol, cols) in wc.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, fr) in rows {
                for &(c, fc) in cols {
                    acc += img[[r, c]] as f64 * fr * fc;
                }
            }
            out[[orow, ocol]] = acc;
        }
    }
    out
}

/// Applies a projective warp: `out(p) = img(inv * p)` in `(x=col, y=row)`
/// homogeneous coordinates. Samples falling outside the source are `fill`.
pub fn warp_inverse(img: &Gray, inv: &Matrix3<f64>, fill: f32) -> Gray {
    let (h, w) = img.dim();
    let view = img.view();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let p = inv * Vector3::new(c as f64, r as f64, 1.0);
        if p.z.abs() < 1e-12 {
            return fill;
        }
        bilinear(view, p.y / p.z, p.x / p.z).unwrap_or(fill)
    })
}

/// Central-difference gradients `(d/dcol, d/drow)` with edge replication.
pub fn gradients(img: &Gray) -> (Gray, Gray) {
    let (h, w) = img.dim();
    let v = img.view();
    let gx = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at_clamped(v, r, c + 1) - at_clamped(v, r, c - 1))
    });
    let gy = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at_clamped(v, r + 1, c) - at_clamped(v, r - 1, c))
    });
    (gx, gy)
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray_png(path: &Path, img: &Gray) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
    let out = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::invalid("gray buffer size mismatch"))?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn save_rgb_png(path: &Path, img: &Rgb) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(img[[ch, r, col]]));
            }
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::invalid("rgb buffer size mismatch"))?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn load_gray_png(path: &Path) -> Result<Gray> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::format(path, e))
}

pub fn load_rgb_png(path: &Path) -> Result<Rgb> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, r, col)| {
        raw[(r * w + col) * 3 + c] as f32 / 255.0
    }))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    }
}

/// Rounds through the 8-bit storage format, matching what a PNG round trip yields.
pub fn quantize(img: &Gray) -> Gray {
    img.mapv(|v| to_u8(v) as f32 / 255.0)
}
