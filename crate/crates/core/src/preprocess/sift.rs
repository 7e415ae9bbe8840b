//! Scale-invariant keypoints: difference-of-Gaussian extrema with sub-pixel
//! refinement, dominant gradient orientations, and 4×4×8 gradient-histogram
//! descriptors.

use std::f32::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::raster::{bilinear, gaussian_blur, Gray};

#[derive(Debug, Clone)]
pub struct SiftParams {
    pub octave_layers: usize,
    pub contrast_threshold: f32,
    pub edge_threshold: f32,
    pub sigma: f64,
    /// Detect on a 2× upsampled base image (more keypoints on small inputs).
    pub upsample: bool,
    pub max_keypoints: usize,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            octave_layers: 3,
            contrast_threshold: 0.02,
            edge_threshold: 10.0,
            sigma: 1.6,
            upsample: true,
            max_keypoints: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keypoint {
    /// Position in input pixel coordinates.
    pub x: f32,
    pub y: f32,
    /// Blur scale in input pixels.
    pub scale: f32,
    /// Radians.
    pub orientation: f32,
    pub response: f32,
    pub descriptor: [f32; 128],
}

const IMG_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_SIG_FCTR: f32 = 1.5;
const ORI_RADIUS: f32 = 3.0 * ORI_SIG_FCTR;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESCR_WIDTH: usize = 4;
const DESCR_BINS: usize = 8;
const DESCR_SCL_FCTR: f32 = 3.0;
const DESCR_MAG_THR: f32 = 0.2;

fn upsample2(img: &Gray) -> Gray {
    let (h, w) = img.dim();
    let v = img.view();
    Array2::from_shape_fn((2 * h, 2 * w), |(r, c)| {
        let (y, x) = ((r as f64 * 0.5).min((h - 1) as f64), (c as f64 * 0.5).min((w - 1) as f64));
        bilinear(v, y, x).unwrap_or(0.0)
    })
}

fn downsample2(img: &Gray) -> Gray {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(r, c)| img[[2 * r, 2 * c]])
}

struct Octave {
    gauss: Vec<Gray>,
    dog: Vec<Gray>,
}

fn build_pyramid(img: &Gray, p: &SiftParams) -> (Vec<Octave>, f32) {
    let (base, coord_scale) = if p.upsample {
        let init = 2.0 * 0.5;
        let up = upsample2(img);
        let d = (p.sigma * p.sigma - init * init).max(0.01).sqrt();
        (gaussian_blur(&up, d), 0.5f32)
    } else {
        let d = (p.sigma * p.sigma - 0.25).max(0.01).sqrt();
        (gaussian_blur(img, d), 1.0f32)
    };
    let s = p.octave_layers;
    let k = 2f64.powf(1.0 / s as f64);
    let incr: Vec<f64> = (0..s + 3)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                let prev = p.sigma * k.powi(i as i32 - 1);
                let total = prev * k;
                (total * total - prev * prev).sqrt()
            }
        })
        .collect();
    let (h, w) = base.dim();
    let n_oct = ((h.min(w) as f64).log2() - 3.0).floor().max(1.0) as usize;
    let mut octaves: Vec<Octave> = Vec::with_capacity(n_oct);
    let mut first = base;
    for o in 0..n_oct {
        if o > 0 {
            first = downsample2(&octaves[o - 1].gauss[s]);
        }
        let mut gauss = vec![first.clone()];
        for sig in incr.iter().skip(1) {
            let next = gaussian_blur(gauss.last().expect("non-empty"), *sig);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|g| &g[1] - &g[0]).collect();
        octaves.push(Octave { gauss, dog });
    }
    (octaves, coord_scale)
}

fn is_extremum(dog: &[Gray], l: usize, r: usize, c: usize, val: f32) -> bool {
    let mut is_max = val > 0.0;
    let mut is_min = val < 0.0;
    for layer in &dog[l - 1..=l + 1] {
        for rr in r - 1..=r + 1 {
            for cc in c - 1..=c + 1 {
                let v = layer[[rr, cc]];
                if std::ptr::eq(layer, &dog[l]) && rr == r && cc == c {
                    continue;
                }
                is_max &= val >= v;
                is_min &= val <= v;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

struct Refined {
    layer: usize,
    r: usize,
    c: usize,
    offset: Vector3<f32>,
    contrast: f32,
}

fn refine(dog: &[Gray], mut l: usize, mut r: usize, mut c: usize, p: &SiftParams) -> Option<Refined> {
    let s = p.octave_layers;
    let (h, w) = dog[0].dim();
    let mut offset = Vector3::zeros();
    let mut converged = false;
    let (mut grad, mut hess) = (Vector3::zeros(), Matrix3::zeros());
    for _ in 0..MAX_INTERP_STEPS {
        let (d0, d1, d2) = (&dog[l - 1], &dog[l], &dog[l + 1]);
        let v = d1[[r, c]];
        let dx = (d1[[r, c + 1]] - d1[[r, c - 1]]) * 0.5;
        let dy = (d1[[r + 1, c]] - d1[[r - 1, c]]) * 0.5;
        let ds = (d2[[r, c]] - d0[[r, c]]) * 0.5;
        let dxx = d1[[r, c + 1]] + d1[[r, c - 1]] - 2.0 * v;
        let dyy = d1[[r + 1, c]] + d1[[r - 1, c]] - 2.0 * v;
        let dss = d2[[r, c]] + d0[[r, c]] - 2.0 * v;
        let dxy = (d1[[r + 1, c + 1]] - d1[[r + 1, c - 1]] - d1[[r - 1, c + 1]] + d1[[r - 1, c - 1]]) * 0.25;
        let dxs = (d2[[r, c + 1]] - d2[[r, c - 1]] - d0[[r, c + 1]] + d0[[r, c - 1]]) * 0.25;
        let dys = (d2[[r + 1, c]] - d2[[r - 1, c]] - d0[[r + 1, c]] + d0[[r - 1, c]]) * 0.25;
        grad = Vector3::new(dx, dy, ds);
        hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        offset = -(hess.try_inverse()? * grad);
        if offset.iter().all(|o| o.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|o| o.abs() > (i32::MAX / 3) as f32) {
            return None;
        }
        let nc = c as i64 + offset.x.round() as i64;
        let nr = r as i64 + offset.y.round() as i64;
        let nl = l as i64 + offset.z.round() as i64;
        if nl < 1
            || nl > s as i64
            || nc < IMG_BORDER as i64
            || nc >= (w - IMG_BORDER) as i64
            || nr < IMG_BORDER as i64
            || nr >= (h - IMG_BORDER) as i64
        {
            return None;
        }
        l = nl as usize;
        r = nr as usize;
        c = nc as usize;
    }
    if !converged {
        return None;
    }
    let contrast = dog[l][[r, c]] + 0.5 * grad.dot(&offset);
    if contrast.abs() * (s as f32) < p.contrast_threshold {
        return None;
    }
    let tr = hess[(0, 0)] + hess[(1, 1)];
    let det = hess[(0, 0)] * hess[(1, 1)] - hess[(0, 1)] * hess[(0, 1)];
    let e = p.edge_threshold;
    if det <= 0.0 || tr * tr * e >= (e + 1.0) * (e + 1.0) * det {
        return None;
    }
    Some(Refined {
        layer: l,
        r,
        c,
        offset,
        contrast,
    })
}

fn orientation_hist(img: &Gray, r: usize, c: usize, radius: i64, sigma: f32) -> [f32; ORI_BINS] {
    let (h, w) = img.dim();
    let mut hist = [0f32; ORI_BINS];
    let expf = -1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        let y = r as i64 + i;
        if y <= 0 || y >= h as i64 - 1 {
            continue;
        }
        for j in -radius..=radius {
            let x = c as i64 + j;
            if x <= 0 || x >= w as i64 - 1 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let dx = img[[y, x + 1]] - img[[y, x - 1]];
            let dy = img[[y - 1, x]] - img[[y + 1, x]];
            let mag = (dx * dx + dy * dy).sqrt();
            let ang = dy.atan2(dx);
            let wgt = (((i * i + j * j) as f32) * expf).exp();
            let mut bin = ((ORI_BINS as f32) * (ang + PI) / (2.0 * PI)).round() as i64;
            bin = bin.rem_euclid(ORI_BINS as i64);
            hist[bin as usize] += wgt * mag;
        }
    }
    // Circular [1 4 6 4 1] / 16 smoothing.
    let n = ORI_BINS as i64;
    let at = |k: i64| hist[k.rem_euclid(n) as usize];
    let mut smooth = [0f32; ORI_BINS];
    for k in 0..n {
        smooth[k as usize] = (at(k - 2) + at(k + 2)) / 16.0
            + (at(k - 1) + at(k + 1)) * 4.0 / 16.0
            + at(k) * 6.0 / 16.0;
    }
    smooth
}

fn descriptor(img: &Gray, r: f32, c: f32, ori: f32, scl: f32) -> [f32; 128] {
    let (h, w) = img.dim();
    let d = DESCR_WIDTH;
    let n = DESCR_BINS;
    let (cos_t, sin_t) = (ori.cos(), ori.sin());
    let bins_per_rad = n as f32 / (2.0 * PI);
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5);
    let hist_width = DESCR_SCL_FCTR * scl;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5).round() as i64;
    let radius = radius.min(((w * w + h * h) as f32).sqrt() as i64);
    let (cos_t, sin_t) = (cos_t / hist_width, sin_t / hist_width);
    let (ri, ci) = (r.round() as i64, c.round() as i64);
    let mut hist = vec![0f32; (d + 2) * (d + 2) * (n + 2)];
    for i in -radius..=radius {
        for j in -radius..=radius {
            let c_rot = j as f32 * cos_t - i as f32 * sin_t;
            let r_rot = j as f32 * sin_t + i as f32 * cos_t;
            let rbin = r_rot + d as f32 / 2.0 - 0.5;
            let cbin = c_rot + d as f32 / 2.0 - 0.5;
            let (y, x) = (ri + i, ci + j);
            if !(rbin > -1.0 && rbin < d as f32 && cbin > -1.0 && cbin < d as f32) {
                continue;
            }
            if y <= 0 || y >= h as i64 - 1 || x <= 0 || x >= w as i64 - 1 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let dx = img[[y, x + 1]] - img[[y, x - 1]];
            let dy = img[[y - 1, x]] - img[[y + 1, x]];
            let mag = (dx * dx + dy * dy).sqrt();
            let mut obin = (dy.atan2(dx) - ori) * bins_per_rad;
            obin = obin.rem_euclid(n as f32);
            let wgt = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let v = mag * wgt;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 as i64 + 1) as usize, (c0 as i64 + 1) as usize);
            let o0 = (o0 as usize) % n;
            let v_r1 = v * fr;
            let v_r0 = v - v_r1;
            for (dr, vr) in [(0, v_r0), (1, v_r1)] {
                let v_c1 = vr * fc;
                let v_c0 = vr - v_c1;
                for (dc, vc) in [(0, v_c0), (1, v_c1)] {
                    let v_o1 = vc * fo;
                    let v_o0 = vc - v_o1;
                    let idx = ((r0 + dr) * (d + 2) + c0 + dc) * (n + 2) + o0;
                    hist[idx] += v_o0;
                    hist[idx + 1] += v_o1;
                }
            }
        }
    }
    let mut out = [0f32; 128];
    for i in 0..d {
        for j in 0..d {
            let idx = ((i + 1) * (d + 2) + j + 1) * (n + 2);
            hist[idx] += hist[idx + n];
            hist[idx + 1] += hist[idx + n + 1];
            for k in 0..n {
                out[(i * d + j) * n + k] = hist[idx + k];
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
    let thr = norm * DESCR_MAG_THR;
    out.iter_mut().for_each(|v| *v = v.min(thr));
    let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::EPSILON);
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Detects keypoints and computes their descriptors.
pub fn detect_and_describe(img: &Gray, p: &SiftParams) -> Vec<Keypoint> {
    let (octaves, coord_scale) = build_pyramid(img, p);
    let s = p.octave_layers;
    let threshold = 0.5 * p.contrast_threshold / s as f32;
    let mut kps = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let (h, w) = oct.dog[0].dim();
        if h <= 2 * IMG_BORDER || w <= 2 * IMG_BORDER {
            continue;
        }
        let octave_scale = 2f32.powi(o as i32);
        for l in 1..=s {
            for r in IMG_BORDER..h - IMG_BORDER {
                for c in IMG_BORDER..w - IMG_BORDER {
                    let val = oct.dog[l][[r, c]];
                    if val.abs() <= threshold || !is_extremum(&oct.dog, l, r, c, val) {
                        continue;
                    }
                    let Some(k) = refine(&oct.dog, l, r, c, p) else {
                        continue;
                    };
                    let scl_octv = (p.sigma as f32) * 2f32.powf((k.layer as f32 + k.offset.z) / s as f32);
                    let gimg = &oct.gauss[k.layer];
                    let radius = (ORI_RADIUS * scl_octv).round() as i64;
                    let hist = orientation_hist(gimg, k.r, k.c, radius, ORI_SIG_FCTR * scl_octv);
                    let omax = hist.iter().cloned().fold(0.0, f32::max);
                    let (fr, fc) = (k.r as f32 + k.offset.y, k.c as f32 + k.offset.x);
                    for j in 0..ORI_BINS {
                        let left = hist[(j + ORI_BINS - 1) % ORI_BINS];
                        let right = hist[(j + 1) % ORI_BINS];
                        if hist[j] > left && hist[j] > right && hist[j] >= ORI_PEAK_RATIO * omax {
                            let bin = j as f32 + 0.5 * (left - right) / (left - 2.0 * hist[j] + right);
                            let bin = bin.rem_euclid(ORI_BINS as f32);
                            let ori = bin * 2.0 * PI / ORI_BINS as f32 - PI;
                            let descriptor = descriptor(gimg, fr, fc, ori, scl_octv);
                            kps.push(Keypoint {
                                x: fc * octave_scale * coord_scale,
                                y: fr * octave_scale * coord_scale,
                                scale: scl_octv * octave_scale * coord_scale,
                                orientation: ori,
                                response: k.contrast.abs(),
                                descriptor,
                            });
                        }
                    }
                }
            }
        }
    }
    if kps.len() > p.max_keypoints {
        kps.sort_by(|a, b| b.response.total_cmp(&a.response));
        kps.truncate(p.max_keypoints);
    }
    kps
}

/// Nearest-neighbour matching with Lowe's ratio test. Returns `(i_a, i_b)` pairs.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f32) -> Vec<(usize, usize)> {
    if b.len() < 2 {
        return Vec::new();
    }
    let r2 = ratio * ratio;
    a.iter()
        .enumerate()
        .filter_map(|(i, ka)| {
            let mut best = (f32::INFINITY, usize::MAX);
            let mut second = f32::INFINITY;
            for (j, kb) in b.iter().enumerate() {
                let d: f32 = ka
                    .descriptor
                    .iter()
                    .zip(&kb.descriptor)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best.0 {
                    second = best.0;
                    best = (d, j);
                } else if d < second {
                    second = d;
                }
            }
            (best.0 < r2 * second).then_some((i, best.1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_vessel_tree, render_triplet, LesionSpec};

    #[test]
    fn finds_keypoints_on_vessel_images() {
        let v = generate_vessel_tree(1, (64, 64)).unwrap();
        let t = render_triplet(&v, &LesionSpec::default(), 0.0, 1).unwrap();
        let kps = detect_and_describe(&t.early, &SiftParams::default());
        assert!(kps.len() >= 10, "{} keypoints", kps.len());
        for k in &kps {
            let n: f32 = k.descriptor.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-3);
            assert!(k.x >= 0.0 && k.x < 64.0 && k.y >= 0.0 && k.y < 64.0);
        }
    }

    #[test]
    fn self_matching_is_identity() {
        let v = generate_vessel_tree(2, (64, 64)).unwrap();
        let t = render_triplet(&v, &LesionSpec::default(), 0.0, 2).unwrap();
        let kps = detect_and_describe(&t.early, &SiftParams::default());
        let m = match_descriptors(&kps, &kps, 0.99);
        for (i, j) in m {
            assert!((kps[i].x - kps[j].x).abs() < 1e-3 && (kps[i].y - kps[j].y).abs() < 1e-3);
        }
    }

    #[test]
    fn flat_image_has_no_keypoints() {
        let img = Array2::from_elem((48, 48), 0.4f32);
        assert!(detect_and_describe(&img, &SiftParams::default()).is_empty());
    }
}
