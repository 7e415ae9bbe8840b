//! Feature-based late-to-early registration: keypoint matching, RANSAC
//! homography fit and an inverse-mapped warp of the late frame.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::sector::{sector_filter, SectorFilterParams};
use super::sift::{detect_and_describe, match_descriptors, SiftParams};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::raster::{gaussian_blur, warp_inverse, Gray};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    pub ratio: f32,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub min_inliers: usize,
    /// Fits whose corners move more than this fraction of the shorter side
    /// are treated as failures.
    pub max_corner_shift: f64,
    /// Gaussian sigma applied to the early frame before detection, to match
    /// the diffuse late phase. 0 disables.
    pub reference_blur: f64,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            ratio: 0.75,
            ransac_threshold: 3.0,
            ransac_iterations: 2000,
            min_inliers: 4,
            max_corner_shift: 0.25,
            reference_blur: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Late frame resampled into the early frame.
    pub warped_late: Gray,
    /// Maps late-frame `(x, y)` to early-frame `(x, y)`.
    pub homography: Homography,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub mean_reprojection_error: f64,
    pub success: bool,
}

/// Per-sample record written as `registration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub status: String,
    pub homography: Option<crate::geometry::HomographyRecord>,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub mean_reprojection_error: Option<f64>,
}

impl RegistrationRecord {
    pub fn skipped() -> Self {
        RegistrationRecord {
            status: "skipped".into(),
            homography: None,
            n_matches: 0,
            n_inliers: 0,
            mean_reprojection_error: None,
        }
    }
}

impl From<&RegistrationResult> for RegistrationRecord {
    fn from(r: &RegistrationResult) -> Self {
        RegistrationRecord {
            status: if r.success { "ok" } else { "failed" }.into(),
            homography: Some((&r.homography).into()),
            n_matches: r.n_matches,
            n_inliers: r.n_inliers,
            mean_reprojection_error: r.mean_reprojection_error.is_finite().then_some(r.mean_reprojection_error),
        }
    }
}

fn reprojection_errors(h: &Homography, src: &[(f64, f64)], dst: &[(f64, f64)]) -> Vec<f64> {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let (x, y) = h.apply(s.0, s.1);
            let e = ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt();
            if e.is_finite() {
                e
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn collinear(p: &[(f64, f64)]) -> bool {
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            for k in j + 1..p.len() {
                let area = (p[j].0 - p[i].0) * (p[k].1 - p[i].1) - (p[j].1 - p[i].1) * (p[k].0 - p[i].0);
                if area.abs() < 1.0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Robust homography fit `src -> dst`. Returns the model and its inlier mask.
pub fn ransac_homography(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    params: &RegistrationParams,
) -> Option<(Homography, Vec<bool>)> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let mut r = rng::stream(params.seed, "ransac");
    let mut best: Option<(usize, f64, Homography)> = None;
    let mut iterations = params.ransac_iterations;
    let mut it = 0;
    while it < iterations {
        it += 1;
        let idx = sample(&mut r, n, 4).into_vec();
        let s: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|&i| dst[i]).collect();
        if collinear(&s) || collinear(&d) {
            continue;
        }
        let Ok(h) = Homography::estimate(&s, &d) else {
            continue;
        };
        let errs = reprojection_errors(&h, src, dst);
        let inl: Vec<f64> = errs.into_iter().filter(|&e| e < params.ransac_threshold).collect();
        let cnt = inl.len();
        let mean = inl.iter().sum::<f64>() / cnt.max(1) as f64;
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => cnt > *bc || (cnt == *bc && mean < *bm),
        };
        if better {
            best = Some((cnt, mean, h));
            // Adaptive stopping for 99% confidence.
            let w = cnt as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            if denom < 0.0 {
                let need = ((0.01f64).ln() / denom).ceil() as usize;
                iterations = iterations.min(need.max(50));
            }
        }
    }
    let (_, _, mut h) = best?;
    let mut mask: Vec<bool> = reprojection_errors(&h, src, dst)
        .iter()
        .map(|&e| e < params.ransac_threshold)
        .collect();
    for _ in 0..3 {
        let s: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| src[i]).collect();
        let d: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| dst[i]).collect();
        if s.len() < 4 {
            break;
        }
        let Ok(refit) = Homography::estimate(&s, &d) else {
            break;
        };
        let new_mask: Vec<bool> = reprojection_errors(&refit, src, dst)
            .iter()
            .map(|&e| e < params.ransac_threshold)
            .collect();
        if new_mask.iter().filter(|&&m| m).count() < mask.iter().filter(|&&m| m).count() {
            break;
        }
        h = refit;
        let done = new_mask == mask;
        mask = new_mask;
        if done {
            break;
        }
    }
    Some((h, mask))
}

fn prefiltered(img: &Gray, f: &SectorFilterParams) -> Result<Gray> {
    // Angiogram vessels are bright; the filter responds to dark lines.
    let resp = sector_filter(&img.mapv(|v| 1.0 - v), f)?;
    let lo = resp.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = resp.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    Ok(resp.mapv(|v| (v - lo) / span))
}

/// Registers `late` onto `early`. On failure the identity is returned with
/// `success == false` and the late frame unchanged.
pub fn register(
    late: &Gray,
    early: &Gray,
    prefilter: Option<&SectorFilterParams>,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    if late.dim() != early.dim() {
        return Err(Error::invalid(format!(
            "late {:?} and early {:?} differ in size",
            late.dim(),
            early.dim()
        )));
    }
    let reference = if params.reference_blur > 0.0 {
        gaussian_blur(early, params.reference_blur)
    } else {
        early.clone()
    };
    let (a, b) = match prefilter {
        Some(f) => (prefiltered(late, f)?, prefiltered(&reference, f)?),
        None => (late.clone(), reference),
    };
    let sp = SiftParams::default();
    let ka = detect_and_describe(&a, &sp);
    let kb = detect_and_describe(&b, &sp);
    let matches = match_descriptors(&ka, &kb, params.ratio);
    let src: Vec<(f64, f64)> = matches.iter().map(|&(i, _)| (ka[i].x as f64, ka[i].y as f64)).collect();
    let dst: Vec<(f64, f64)> = matches.iter().map(|&(_, j)| (kb[j].x as f64, kb[j].y as f64)).collect();
    let failed = |n_inliers| RegistrationResult {
        warped_late: late.clone(),
        homography: Homography::identity(),
        n_matches: matches.len(),
        n_inliers,
        mean_reprojection_error: f64::NAN,
        success: false,
    };
    let Some((h, mask)) = ransac_homography(&src, &dst, params) else {
        return Ok(failed(0));
    };
    let n_inliers = mask.iter().filter(|&&m| m).count();
    let (hgt, wid) = late.dim();
    if n_inliers < params.min_inliers.max(4)
        || h.corner_displacement(wid, hgt) > params.max_corner_shift * hgt.min(wid) as f64
    {
        return Ok(failed(n_inliers));
    }
    let errs = reprojection_errors(&h, &src, &dst);
    let mean = errs.iter().zip(&mask).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / n_inliers as f64;
    Ok(RegistrationResult {
        warped_late: warp_inverse(late, h.inverse().matrix(), 0.0),
        homography: h,
        n_matches: matches.len(),
        n_inliers,
        mean_reprojection_error: mean,
        success: true,
    })
}
