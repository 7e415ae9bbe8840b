//! Multi-scale fan-sector line filter.
//!
//! For a window of radius `r` centred on pixel value `I`, the disc is cut into
//! `N` equal-angle sectors. With `I_m` the largest sector mean and `Gx_s`,
//! `Gy_s` the mean central-difference gradients of sector `s`, the single-scale
//! response is
//!
//! ```text
//! ( Σ_s [ I_m - α (Gx_s + Gy_s) - I ] + I ) / (N + 1)
//! ```
//!
//! and scales are mixed linearly with `scale_weights`. The response is high
//! where the centre is darker than its brightest sector, so dark-on-bright
//! line structure lights up; bright vessels are filtered on the inverted image.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{at_clamped, gradients, Gray};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectorFilterParams {
    pub window_radii: Vec<usize>,
    pub n_sectors: usize,
    pub alpha: f64,
    pub scale_weights: Vec<f64>,
}

impl Default for SectorFilterParams {
    fn default() -> Self {
        SectorFilterParams {
            window_radii: vec![3, 5, 9],
            n_sectors: 8,
            alpha: 0.5,
            scale_weights: vec![1.0 / 3.0; 3],
        }
    }
}

struct Offset {
    dr: isize,
    dc: isize,
    sector: usize,
}

fn sector_offsets(radius: usize, n: usize) -> Vec<Offset> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if (dr == 0 && dc == 0) || dr * dr + dc * dc > r * r {
                continue;
            }
            // Angle measured with rows pointing down; sectors tile [0, 2π).
            let theta = (dr as f64).atan2(dc as f64).rem_euclid(std::f64::consts::TAU);
            let sector = ((theta / std::f64::consts::TAU * n as f64) as usize).min(n - 1);
            out.push(Offset { dr, dc, sector });
        }
    }
    out
}

impl SectorFilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_radii.is_empty() {
            return Err(Error::invalid("sector filter needs at least one radius"));
        }
        if self.window_radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("window radii must be strictly increasing"));
        }
        if self.window_radii[0] < 2 {
            return Err(Error::invalid("window radii must be >= 2"));
        }
        if self.n_sectors < 4 {
            return Err(Error::invalid("need at least 4 sectors"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and >= 0"));
        }
        if self.scale_weights.len() != self.window_radii.len() {
            return Err(Error::invalid("one scale weight per radius required"));
        }
        let s: f64 = self.scale_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("scale weights sum to {s}, expected 1")));
        }
        for &r in &self.window_radii {
            let offs = sector_offsets(r, self.n_sectors);
            let mut seen = vec![false; self.n_sectors];
            offs.iter().for_each(|o| seen[o.sector] = true);
            if seen.iter().any(|s| !s) {
                return Err(Error::invalid(format!(
                    "radius {r} leaves empty sectors with N = {}",
                    self.n_sectors
                )));
            }
        }
        Ok(())
    }
}

/// Response at each configured scale, before the linear mix.
pub fn sector_filter_scales(img: &Gray, params: &SectorFilterParams) -> Result<Vec<Gray>> {
    params.validate()?;
    let (h, w) = img.dim();
    let r_max = *params.window_radii.last().expect("validated non-empty");
    if 2 * r_max + 1 > h.min(w) {
        return Err(Error::invalid(format!(
            "window of radius {r_max} does not fit a {h}x{w} image"
        )));
    }
    let (gx, gy) = gradients(img);
    let n = params.n_sectors;
    let v = img.view();
    let (gxv, gyv) = (gx.view(), gy.view());
    let mut scales = Vec::with_capacity(params.window_radii.len());
    for &radius in &params.window_radii {
        let offs = sector_offsets(radius, n);
        let mut out = Array2::<f32>::zeros((h, w));
        let mut dev = vec![0f64; n];
        let mut grad = vec![0f64; n];
        let mut count = vec![0usize; n];
        for r in 0..h {
            for c in 0..w {
                let centre = img[[r, c]] as f64;
                dev.iter_mut().for_each(|x| *x = 0.0);
                grad.iter_mut().for_each(|x| *x = 0.0);
                count.iter_mut().for_each(|x| *x = 0);
                for o in &offs {
                    let (rr, cc) = (r as isize + o.dr, c as isize + o.dc);
                    // Sector means are accumulated as deviations from the
                    // centre so flat regions give exactly zero.
                    dev[o.sector] += at_clamped(v, rr, cc) as f64 - centre;
                    grad[o.sector] +=
                        at_clamped(gxv, rr, cc) as f64 + at_clamped(gyv, rr, cc) as f64;
                    count[o.sector] += 1;
                }
                let mut peak = f64::NEG_INFINITY;
                for s in 0..n {
                    peak = peak.max(dev[s] / count[s] as f64);
                }
                let mut acc = 0.0;
                for s in 0..n {
                    acc += peak - params.alpha * grad[s] / count[s] as f64;
                }
                out[[r, c]] = ((acc + centre) / (n as f64 + 1.0)) as f32;
            }
        }
        scales.push(out);
    }
    Ok(scales)
}

/// Linear mix of the per-scale responses.
pub fn sector_filter(img: &Gray, params: &SectorFilterParams) -> Result<Gray> {
    let scales = sector_filter_scales(img, params)?;
    let mut out = Array2::<f32>::zeros(img.dim());
    for (s, &wt) in scales.iter().zip(&params.scale_weights) {
        out.zip_mut_with(s, |o, &x| *o += (wt * x as f64) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_vessel_tree, render_triplet, LesionSpec};
    use ndarray::Axis;

    #[test]
    fn constant_image_maps_to_c_over_n_plus_one() {
        let p = SectorFilterParams::default();
        for c in [0.0f32, 0.3, 0.77, 1.0] {
            let img = Array2::from_elem((24, 24), c);
            let expect = (c as f64 / (p.n_sectors as f64 + 1.0)) as f32;
            for s in sector_filter_scales(&img, &p).unwrap() {
                assert!(s.iter().all(|&v| v == expect));
            }
            let all = sector_filter(&img, &p).unwrap();
            assert!(all.iter().all(|&v| (v - expect).abs() < 1e-6));
        }
    }

    #[test]
    fn alpha_zero_matches_direct_substitution() {
        // Bright spot to the right of the centre: one sector dominates.
        let mut img = Array2::from_elem((21, 21), 0.2f32);
        for r in 9..12 {
            for c in 13..16 {
                img[[r, c]] = 0.9;
            }
        }
        let p = SectorFilterParams {
            window_radii: vec![6],
            n_sectors: 8,
            alpha: 0.0,
            scale_weights: vec![1.0],
        };
        let out = sector_filter(&img, &p).unwrap();
        let offs = sector_offsets(6, 8);
        let mut sums = [0f64; 8];
        let mut counts = [0f64; 8];
        for o in &offs {
            sums[o.sector] += img[[(10 + o.dr) as usize, (10 + o.dc) as usize]] as f64;
            counts[o.sector] += 1.0;
        }
        let im = (0..8).map(|s| sums[s] / counts[s]).fold(f64::MIN, f64::max);
        let i = 0.2f64 as f32 as f64;
        let expect = (8.0 * (im - i) + i) / 9.0;
        assert!((out[[10, 10]] as f64 - expect).abs() < 1e-6);

        let mut brighter = img.clone();
        for r in 9..12 {
            for c in 13..16 {
                brighter[[r, c]] = 1.0;
            }
        }
        assert!(sector_filter(&brighter, &p).unwrap()[[10, 10]] > out[[10, 10]]);
    }

    #[test]
    fn scaling_equivariance_without_gradient_term() {
        let img = Array2::from_shape_fn((30, 30), |(r, c)| ((r * 13 + c * 7) % 17) as f32 / 17.0);
        let p = SectorFilterParams {
            alpha: 0.0,
            ..Default::default()
        };
        let base = sector_filter(&img, &p).unwrap();
        for k in [0.5f32, 2.0, 3.7] {
            let scaled = sector_filter(&img.mapv(|v| v * k), &p).unwrap();
            for (a, b) in base.iter().zip(scaled.iter()) {
                assert!((a * k - b).abs() < 1e-5 * k.max(1.0));
            }
        }
    }

    #[test]
    fn dark_vessels_respond_more_than_background() {
        for seed in 0..5 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let t = render_triplet(&v, &LesionSpec::default(), 0.0, seed).unwrap();
            let green = t.slo.index_axis(Axis(0), 1).to_owned();
            let resp = sector_filter(&green, &SectorFilterParams::default()).unwrap();
            let (mut vs, mut vn, mut bs, mut bn) = (0.0, 0.0, 0.0, 0.0);
            for ((idx, &g), &x) in v.grid.indexed_iter().zip(resp.iter()) {
                let _ = idx;
                if g != 0 {
                    vs += x as f64;
                    vn += 1.0;
                } else {
                    bs += x as f64;
                    bn += 1.0;
                }
            }
            assert!(vs / vn > bs / bn, "seed {seed}: {} vs {}", vs / vn, bs / bn);
        }
    }

    #[test]
    fn bright_vessels_respond_after_inversion() {
        for seed in 0..5 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let t = render_triplet(&v, &LesionSpec::default(), 0.0, seed).unwrap();
            let resp = sector_filter(&t.early.mapv(|x| 1.0 - x), &SectorFilterParams::default()).unwrap();
            let on: Vec<f32> = resp.iter().zip(v.grid.iter()).filter(|(_, &g)| g != 0).map(|(x, _)| *x).collect();
            let off: Vec<f32> = resp.iter().zip(v.grid.iter()).filter(|(_, &g)| g == 0).map(|(x, _)| *x).collect();
            let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
            assert!(mean(&on) > mean(&off));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let img = Array2::from_elem((12, 12), 0.5f32);
        let bad = [
            SectorFilterParams { window_radii: vec![5, 3], scale_weights: vec![0.5, 0.5], ..Default::default() },
            SectorFilterParams { window_radii: vec![1], scale_weights: vec![1.0], ..Default::default() },
            SectorFilterParams { n_sectors: 3, ..Default::default() },
            SectorFilterParams { scale_weights: vec![0.5, 0.5], ..Default::default() },
        ];
        for p in bad {
            assert!(sector_filter(&Array2::from_elem((40, 40), 0.5f32), &p).is_err());
        }
        // Window larger than the image.
        assert!(matches!(
            sector_filter(&img, &SectorFilterParams::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
