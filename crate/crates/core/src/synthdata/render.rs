use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::vessels::VesselMap;
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::raster::{gaussian_blur, warp_inverse, Gray, Rgb};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Leakage,
    Scar,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Blob {
    /// `(row, col)`.
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
    pub kind: LesionKind,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LesionSpec {
    pub blobs: Vec<Blob>,
}

impl LesionSpec {
    pub fn validate(&self, size: (usize, usize)) -> Result<()> {
        for b in &self.blobs {
            let (r, c) = b.center;
            if !(0.0..size.0 as f64).contains(&r) || !(0.0..size.1 as f64).contains(&c) {
                return Err(Error::invalid(format!("lesion centre {:?} outside image", b.center)));
            }
            if b.radius < 2.0 {
                return Err(Error::invalid(format!("lesion radius {} below 2 px", b.radius)));
            }
            if !(0.0..=1.0).contains(&b.intensity) {
                return Err(Error::invalid("lesion intensity must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Uniformly placed blobs inside the central field; radii scale with size.
    pub fn random(seed: u64, size: (usize, usize), count: usize, leakage_only: bool) -> Self {
        let mut rng = rng::stream(seed, "lesions");
        let (h, w) = (size.0 as f64, size.1 as f64);
        let scale = size.0.min(size.1) as f64 / 64.0;
        let blobs = (0..count)
            .map(|_| {
                let radius = rng.gen_range(5.0..8.0) * scale;
                // Polar sampling inside the inner 70% of the field ellipse.
                let t = rng.gen_range(0.0..std::f64::consts::TAU);
                let rho = 0.7 * rng.gen::<f64>().sqrt();
                let center = (
                    h / 2.0 + rho * FIELD_SEMI_AXIS * h * t.sin(),
                    w / 2.0 + rho * FIELD_SEMI_AXIS * w * t.cos(),
                );
                let kind = if leakage_only || rng.gen_bool(0.75) {
                    LesionKind::Leakage
                } else {
                    LesionKind::Scar
                };
                Blob {
                    center,
                    radius,
                    intensity: rng.gen_range(0.6..0.95),
                    kind,
                }
            })
            .collect();
        LesionSpec { blobs }
    }
}

/// One training example: condition, early-phase target, late-phase target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTriplet {
    pub slo: Rgb,
    pub early: Gray,
    pub late: Gray,
    /// Lesion support in the early (reference) frame, values 0 or 1.
    pub lesion_mask: Option<Gray>,
    /// Transform taking early-frame coordinates to where that content sits in `late`.
    pub misalignment: Option<Homography>,
    pub seed: u64,
}

impl PairedTriplet {
    pub fn size(&self) -> (usize, usize) {
        self.early.dim()
    }
}

/// Fixed early-to-late relation: late = dim * blur(early) + lesions.
pub const LATE_BLUR_SIGMA: f64 = 1.5;
pub const LATE_DIM: f32 = 0.7;
const FIELD_SEMI_AXIS: f64 = 0.47;
const EARLY_BACKGROUND: f32 = 0.08;
const EARLY_VESSEL: f32 = 0.8;
const DISC_GLOW: f32 = 0.12;

fn texture(seed: u64, name: &str, size: (usize, usize), sigma: f64) -> Gray {
    let mut rng = rng::stream(seed, name);
    let white = Array2::from_shape_simple_fn(size, || rng.sample::<f32, _>(StandardNormal));
    let smooth = gaussian_blur(&white, sigma);
    let n = smooth.len() as f32;
    let mean = smooth.sum() / n;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt().max(1e-6);
    smooth.mapv(|v| (v - mean) / std)
}

fn field_mask(size: (usize, usize)) -> Gray {
    let (h, w) = size;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ay, ax) = (FIELD_SEMI_AXIS * h as f64, FIELD_SEMI_AXIS * w as f64);
    let soft = 1.5 / ay.min(ax);
    Array2::from_shape_fn(size, |(r, c)| {
        let d = (((r as f64 - cy) / ay).powi(2) + ((c as f64 - cx) / ax).powi(2)).sqrt();
        (((1.0 - d) / soft) * 0.5 + 0.5).clamp(0.0, 1.0) as f32
    })
}

fn random_corner_homography<R: Rng>(rng: &mut R, size: (usize, usize), strength: f64) -> Homography {
    let (h, w) = ((size.0 - 1) as f64, (size.1 - 1) as f64);
    let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let dst: Vec<(f64, f64)> = src
        .iter()
        .map(|&(x, y)| {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let rho = strength * rng.gen::<f64>().sqrt();
            (x + rho * t.cos(), y + rho * t.sin())
        })
        .collect();
    Homography::estimate(&src, &dst).expect("four distinct corners give a valid homography")
}

/// Renders the three modalities for one vessel tree and lesion set.
pub fn render_triplet(
    vmap: &VesselMap,
    lesions: &LesionSpec,
    misalign_strength: f64,
    seed: u64,
) -> Result<PairedTriplet> {
    let size = vmap.size();
    let (h, w) = size;
    lesions.validate(size)?;
    if !(misalign_strength >= 0.0 && misalign_strength.is_finite()) {
        return Err(Error::invalid("misalign_strength must be finite and >= 0"));
    }
    let scale = h.min(w) as f64 / 64.0;
    let field = field_mask(size);
    let fine = texture(seed, "texture-fine", size, 1.5 * scale);
    let coarse = texture(seed, "texture-coarse", size, 4.0 * scale);
    let vessels = gaussian_blur(&vmap.grid.mapv(|v| v as f32), 0.6 * scale);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let dmax = (cy * cy + cx * cx).sqrt();
    let disc_sigma = 3.0 * scale;
    let (dy, dx) = vmap.disc_center;

    let vignette = Array2::from_shape_fn(size, |(r, c)| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt() / dmax;
        (1.0 - 0.35 * d * d) as f32
    });
    let glow = Array2::from_shape_fn(size, |(r, c)| {
        let d2 = (r as f64 - dy).powi(2) + (c as f64 - dx).powi(2);
        (-d2 / (2.0 * disc_sigma * disc_sigma)).exp() as f32
    });

    let mut early = Array2::<f32>::zeros(size);
    let mut slo = Array3::<f32>::zeros((3, h, w));
    // Base tint, vessel darkening, texture gain per SLO channel.
    let tint = [(0.62f32, 0.28f32, 0.05f32), (0.48, 0.32, 0.05), (0.22, 0.10, 0.03)];
    for r in 0..h {
        for c in 0..w {
            let f = field[[r, c]];
            let v = vessels[[r, c]];
            let e = EARLY_BACKGROUND * vignette[[r, c]]
                + 0.015 * fine[[r, c]]
                + EARLY_VESSEL * v
                + DISC_GLOW * glow[[r, c]];
            early[[r, c]] = (f * e).clamp(0.0, 1.0);
            for (ch, &(base, dark, gain)) in tint.iter().enumerate() {
                let inside = base * vignette[[r, c]] + gain * fine[[r, c]] - dark * v
                    + 0.12 * glow[[r, c]];
                // Orbital analogue outside the field: bright, coarse clutter.
                let orbit = 0.45 + 0.2 * coarse[[r, c]] + 0.05 * fine[[r, c]] - 0.1 * ch as f32;
                slo[[ch, r, c]] = (f * inside + (1.0 - f) * orbit).clamp(0.0, 1.0);
            }
        }
    }

    let mut late = gaussian_blur(&early, LATE_BLUR_SIGMA * scale).mapv(|v| v * LATE_DIM);
    let mut mask = Array2::<f32>::zeros(size);
    for b in &lesions.blobs {
        let reach = (b.radius * 1.6).ceil() as isize;
        let (br, bc) = (b.center.0.round() as isize, b.center.1.round() as isize);
        for r in (br - reach).max(0)..=(br + reach).min(h as isize - 1) {
            for c in (bc - reach).max(0)..=(bc + reach).min(w as isize - 1) {
                let d = ((r as f64 - b.center.0).powi(2) + (c as f64 - b.center.1).powi(2)).sqrt();
                let (ru, cu) = (r as usize, c as usize);
                if d <= b.radius {
                    mask[[ru, cu]] = 1.0;
                }
                let profile = match b.kind {
                    // Diffuse: flat core, smooth shoulder out to 1.5 radii.
                    LesionKind::Leakage => {
                        let t = ((d - 0.6 * b.radius) / (0.9 * b.radius)).clamp(0.0, 1.0);
                        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                    }
                    LesionKind::Scar => {
                        if d <= b.radius {
                            0.7
                        } else {
                            0.0
                        }
                    }
                };
                late[[ru, cu]] += (b.intensity * profile) as f32;
            }
        }
    }
    late.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let misalignment = if misalign_strength > 0.0 {
        let mut rng = rng::stream(seed, "misalignment");
        let m = random_corner_homography(&mut rng, size, misalign_strength);
        late = warp_inverse(&late, m.inverse().matrix(), 0.0);
        m
    } else {
        Homography::identity()
    };

    Ok(PairedTriplet {
        slo,
        early,
        late,
        lesion_mask: Some(mask),
        misalignment: Some(misalignment),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_vessel_tree;

    fn blob(center: (f64, f64), radius: f64, intensity: f64) -> LesionSpec {
        LesionSpec {
            blobs: vec![Blob {
                center,
                radius,
                intensity,
                kind: LesionKind::Leakage,
            }],
        }
    }

    #[test]
    fn zero_case_is_blur_and_dim_only() {
        let v = generate_vessel_tree(3, (64, 64)).unwrap();
        let t = render_triplet(&v, &LesionSpec::default(), 0.0, 3).unwrap();
        let expect = gaussian_blur(&t.early, LATE_BLUR_SIGMA).mapv(|x| (x * LATE_DIM).clamp(0.0, 1.0));
        assert_eq!(t.late, expect);
        assert!(t.lesion_mask.as_ref().unwrap().iter().all(|&m| m == 0.0));
        assert_eq!(t.misalignment, Some(Homography::identity()));
    }

    #[test]
    fn single_blob_brightens_late_phase() {
        for seed in 0..10 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let l = blob((30.0, 34.0), 5.0, 0.9);
            let t = render_triplet(&v, &l, 0.0, seed).unwrap();
            let m = t.lesion_mask.as_ref().unwrap();
            let n = m.sum();
            let late_in = (&t.late * m).sum() / n;
            let early_in = (&t.early * m).sum() / n;
            assert!(late_in - early_in > 0.3, "seed {seed}: {late_in} vs {early_in}");
        }
    }

    #[test]
    fn misalignment_bounded_by_strength() {
        for seed in 0..20 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let t = render_triplet(&v, &LesionSpec::default(), 4.0, seed).unwrap();
            let m = t.misalignment.unwrap();
            assert!(m.corner_displacement(64, 64) <= 4.0 + 1e-6);
            assert!(m.matrix().determinant().abs() > 1e-9);
        }
    }

    #[test]
    fn background_alignment_without_misalignment() {
        for seed in 0..20 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let l = LesionSpec::random(seed, (64, 64), 2, true);
            let t = render_triplet(&v, &l, 0.0, seed).unwrap();
            let m = t.lesion_mask.as_ref().unwrap();
            let (mut acc, mut n) = (0.0, 0.0);
            for ((idx, &e), &la) in t.early.indexed_iter().zip(t.late.iter()) {
                if v.grid[idx] == 0 && m[idx] == 0.0 {
                    acc += (e - la).abs() as f64;
                    n += 1.0;
                }
            }
            assert!(acc / n < 0.05, "seed {seed}: {}", acc / n);
        }
    }

    #[test]
    fn lesion_signal_dominates() {
        for seed in 0..20 {
            let v = generate_vessel_tree(seed, (64, 64)).unwrap();
            let l = LesionSpec::random(seed, (64, 64), 1, true);
            let t = render_triplet(&v, &l, 0.0, seed).unwrap();
            let m = t.lesion_mask.as_ref().unwrap();
            let diff = (&t.early - &t.late).mapv(f32::abs);
            let inside = (&diff * m).sum() / m.sum();
            let outside = (&diff * &m.mapv(|x| 1.0 - x)).sum() / (m.len() as f32 - m.sum());
            assert!(inside >= 2.0 * outside, "seed {seed}: {inside} vs {outside}");
        }
    }

    #[test]
    fn values_in_unit_range() {
        let v = generate_vessel_tree(11, (64, 64)).unwrap();
        let l = LesionSpec::random(11, (64, 64), 3, false);
        let t = render_triplet(&v, &l, 3.0, 11).unwrap();
        for x in t.slo.iter().chain(t.early.iter()).chain(t.late.iter()) {
            assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn invalid_lesions_rejected() {
        let v = generate_vessel_tree(1, (64, 64)).unwrap();
        assert!(render_triplet(&v, &blob((70.0, 3.0), 4.0, 0.5), 0.0, 1).is_err());
        assert!(render_triplet(&v, &blob((30.0, 3.0), 1.0, 0.5), 0.0, 1).is_err());
    }
}
