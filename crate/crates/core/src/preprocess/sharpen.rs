use ndarray::{ArrayViewMut2, Axis};

use crate::raster::Rgb;

pub const HIST_BINS: usize = 256;

#[inline]
fn bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1)
}

/// Histogram-equalises one plane in place: a value in bin `b` maps to the
/// empirical CDF `#{pixels in bins <= b} / n`.
pub fn equalize_plane(mut plane: ArrayViewMut2<f32>) {
    let n = plane.len();
    if n == 0 {
        return;
    }
    let mut hist = [0usize; HIST_BINS];
    for &v in plane.iter() {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0f32; HIST_BINS];
    let mut acc = 0usize;
    for (slot, count) in cdf.iter_mut().zip(hist) {
        acc += count;
        *slot = acc as f32 / n as f32;
    }
    plane.mapv_inplace(|v| cdf[bin(v)]);
}

/// Equalises the three colour channels independently and recombines them.
pub fn sharpen_slo(img: &Rgb) -> Rgb {
    let mut out = img.clone();
    for ch in out.axis_iter_mut(Axis(0)) {
        equalize_plane(ch);
    }
    out
}
