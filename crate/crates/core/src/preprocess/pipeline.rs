use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::register::{register, RegistrationParams, RegistrationRecord};
use super::sector::SectorFilterParams;
use super::sharpen::sharpen_slo;
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::raster;
use crate::synthdata::{Manifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub sharpen: bool,
    pub register: bool,
    /// Line filter applied to both frames before keypoint detection.
    pub prefilter: Option<SectorFilterParams>,
    pub registration: RegistrationParams,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            sharpen: true,
            register: true,
            prefilter: Some(SectorFilterParams::default()),
            registration: RegistrationParams {
                reference_blur: 1.5,
                ..RegistrationParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub n_samples: usize,
    pub n_registered: usize,
    pub n_failed: usize,
    /// Mean corner error against the synthetic ground truth over successful fits.
    pub mean_corner_error: Option<f64>,
    /// Fraction of samples registered with corner error below 2 px.
    pub accurate_fraction: Option<f64>,
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

/// Writes `slo_sharpened.png`, `late_registered.png` and `registration.json`
/// for every sample of the dataset at `root`. Disabled stages byte-copy their
/// input.
pub fn preprocess_dataset(root: &Path, opts: &PreprocessOptions) -> Result<PreprocessSummary> {
    let manifest = Manifest::load(root)?;
    let mut summary = PreprocessSummary::default();
    let mut errs = Vec::new();
    let mut accurate = 0usize;
    for split in [Split::Train, Split::Test] {
        for s in manifest.samples(root, split) {
            summary.n_samples += 1;
            if opts.sharpen {
                let slo = raster::load_rgb_png(&s.slo())?;
                raster::save_rgb_png(&s.slo_sharpened(), &sharpen_slo(&slo))?;
            } else {
                copy(&s.slo(), &s.slo_sharpened())?;
            }
            let record = if opts.register {
                let late = raster::load_gray_png(&s.late())?;
                let early = raster::load_gray_png(&s.early())?;
                let params = RegistrationParams {
                    seed: s.seed,
                    ..opts.registration.clone()
                };
                let res = register(&late, &early, opts.prefilter.as_ref(), &params)?;
                raster::save_gray_png(&s.late_registered(), &res.warped_late)?;
                if res.success {
                    summary.n_registered += 1;
                    let meta = s.load_meta()?;
                    let truth = Homography::try_from(&meta.homography)?.inverse();
                    let (h, w) = early.dim();
                    let e = res.homography.corner_error(&truth, w, h);
                    if e < 2.0 {
                        accurate += 1;
                    }
                    errs.push(e);
                } else {
                    summary.n_failed += 1;
                    log::warn!("registration failed for sample {}", s.id);
                }
                RegistrationRecord::from(&res)
            } else {
                copy(&s.late(), &s.late_registered())?;
                RegistrationRecord::skipped()
            };
            let text = serde_json::to_string_pretty(&record).expect("serialisable") + "\n";
            let path = s.registration();
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    if opts.register && summary.n_samples > 0 {
        summary.accurate_fraction = Some(accurate as f64 / summary.n_samples as f64);
        if !errs.is_empty() {
            summary.mean_corner_error = Some(errs.iter().sum::<f64>() / errs.len() as f64);
        }
    }
    Ok(summary)
}
