//! In-memory training sets built from a dataset directory.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{self, Gray, Rgb};
use crate::rng;
use crate::synthdata::{augment, AugmentationParams, Manifest, PairedTriplet, Split};

/// One sample as the trainers see it.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub seed: u64,
    /// Condition image (sharpened when preprocessing ran).
    pub condition: Rgb,
    pub early: Gray,
    /// Late frame in early-frame coordinates when registration ran.
    pub late: Gray,
    pub lesion_mask: Option<Gray>,
}

/// Which preprocessing outputs the loader must use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Use `slo_sharpened.png` as the condition instead of `slo.png`.
    pub sharpened: bool,
    /// Use `late_registered.png` instead of `late.png`.
    pub registered: bool,
}

/// Loads every sample of `split`. A requested preprocessing output that is
/// missing is an invalid-argument error naming the sample.
pub fn load_split(root: &Path, split: Split, opts: LoadOptions) -> Result<Vec<PreparedSample>> {
    let manifest = Manifest::load(root)?;
    let mut out = Vec::new();
    for s in manifest.samples(root, split) {
        let pick = |want: bool, pre: std::path::PathBuf, raw: std::path::PathBuf| -> Result<std::path::PathBuf> {
            if !want {
                Ok(raw)
            } else if pre.exists() {
                Ok(pre)
            } else {
                Err(Error::invalid(format!(
                    "sample {}: {} not found; run `angiogen preprocess` first",
                    s.id,
                    pre.display()
                )))
            }
        };
        let cond = pick(opts.sharpened, s.slo_sharpened(), s.slo())?;
        let late = pick(opts.registered, s.late_registered(), s.late())?;
        let mask = s.lesion_mask();
        out.push(PreparedSample {
            id: s.id.clone(),
            seed: s.seed,
            condition: raster::load_rgb_png(&cond)?,
            early: raster::load_gray_png(&s.early())?,
            late: raster::load_gray_png(&late)?,
            lesion_mask: if mask.exists() {
                Some(raster::load_gray_png(&mask)?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
            } else {
                None
            },
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no {} samples under {}", split.dir_name(), root.display())));
    }
    Ok(out)
}

/// Appends `copies` augmented versions of every sample: a random rotation
/// within ±5° and a random horizontal flip, applied jointly to condition,
/// frames and lesion mask. Augmentation runs on preprocessed images, so the
/// sharpened condition and registered late frame move together. Copies are
/// keyed by `(seed, id, k)`.
pub fn augment_samples(samples: Vec<PreparedSample>, copies: usize, seed: u64) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(samples.len() * (copies + 1));
    for s in &samples {
        let t = PairedTriplet {
            slo: s.condition.clone(),
            early: s.early.clone(),
            late: s.late.clone(),
            lesion_mask: s.lesion_mask.clone(),
            misalignment: None,
            seed: s.seed,
        };
        let size = t.size();
        for k in 0..copies {
            let p = AugmentationParams::random(rng::derive(seed, &format!("{}:{k}", s.id)), size, size)?;
            let a = augment(&t, &p)?;
            out.push(PreparedSample {
                id: format!("{}~aug{k}", s.id),
                seed: s.seed,
                condition: a.slo,
                early: a.early,
                late: a.late,
                lesion_mask: a.lesion_mask,
            });
        }
    }
    let mut all = samples;
    all.extend(out);
    Ok(all)
}
