use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fid, inception_score, max_ms_ssim_scales, ms_ssim, psnr, Classifier, Embedder};
use super::{RandomConvClassifier, RandomConvEmbedder};
use crate::error::{Error, Result};
use crate::raster::{self, Gray};
use crate::synthdata::{Manifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `None` picks the largest count the image size allows (at most 5).
    pub ms_ssim_scales: Option<usize>,
    pub use_embedder: bool,
    pub use_classifier: bool,
    pub feature_seed: u64,
    pub classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ms_ssim_scales: None,
            use_embedder: true,
            use_classifier: true,
            feature_seed: 7,
            classes: 10,
        }
    }
}

mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// Evaluation results. `psnr_db` is the mean over pairs; identical pairs
/// make it infinite, written as `"inf"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    pub is_score: Option<f64>,
    #[serde(with = "inf_f64")]
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
    pub n_samples: usize,
    /// Squared error over lesion-mask pixels, pooled across samples that
    /// have a non-empty mask.
    pub lesion_mse: Option<f64>,
    pub lesion_samples: usize,
    pub embedder: Option<String>,
    pub classifier: Option<String>,
    pub config_hash: Option<String>,
    /// Resolved run configuration the numbers were produced under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad metric report: {e}")))
    }
}

/// Images keyed by id, with lesion masks where the source has them.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: BTreeMap<String, Gray>,
    pub masks: BTreeMap<String, Gray>,
}

/// Reads either a dataset directory (the test split's late frames, using the
/// registered frame when present) or a flat directory of `<id>.png` files.
pub fn collect_images(dir: &Path) -> Result<ImageSet> {
    let mut set = ImageSet::default();
    if Manifest::path(dir).exists() {
        let manifest = Manifest::load(dir)?;
        for s in manifest.samples(dir, Split::Test) {
            let reg = s.late_registered();
            let path = if reg.exists() { reg } else { s.late() };
            set.images.insert(s.id.clone(), raster::load_gray_png(&path)?);
            let m = s.lesion_mask();
            if m.exists() {
                set.masks.insert(s.id.clone(), raster::load_gray_png(&m)?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
            }
        }
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let path = e.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|x| x.to_str()) == Some("png") {
                let id = path.file_stem().and_then(|x| x.to_str()).unwrap_or_default().to_string();
                set.images.insert(id, raster::load_gray_png(&path)?);
            }
        }
    }
    Ok(set)
}

/// Compares generated images against references paired by id.
pub fn evaluate(dataset_dir: &Path, generated_dir: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let reference = collect_images(dataset_dir)?;
    let generated = collect_images(generated_dir)?;
    if reference.images.is_empty() || generated.images.is_empty() {
        return Err(Error::invalid(format!(
            "nothing to evaluate: {} reference and {} generated images",
            reference.images.len(),
            generated.images.len()
        )));
    }
    let only_ref: Vec<_> = reference.images.keys().filter(|k| !generated.images.contains_key(*k)).collect();
    let only_gen: Vec<_> = generated.images.keys().filter(|k| !reference.images.contains_key(*k)).collect();
    if !only_ref.is_empty() || !only_gen.is_empty() {
        return Err(Error::invalid(format!(
            "unpaired images: missing from generated {only_ref:?}, missing from reference {only_gen:?}"
        )));
    }
    let ids: Vec<&String> = reference.images.keys().collect();
    let (h, w) = reference.images[ids[0]].dim();
    let scales = cfg.ms_ssim_scales.unwrap_or_else(|| max_ms_ssim_scales(h, w).max(1));
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let (mut lesion_err, mut lesion_px, mut lesion_samples) = (0.0, 0.0, 0);
    for id in &ids {
        let (r, g) = (&reference.images[*id], &generated.images[*id]);
        if r.dim() != g.dim() {
            return Err(Error::invalid(format!("{id}: reference {:?} vs generated {:?}", r.dim(), g.dim())));
        }
        psnr_sum += psnr(r.view(), g.view(), 1.0)?;
        ssim_sum += ms_ssim(r.view(), g.view(), scales)?;
        if let Some(m) = reference.masks.get(*id) {
            let px: f64 = m.iter().map(|&v| v as f64).sum();
            if px > 0.0 {
                lesion_samples += 1;
                lesion_px += px;
                lesion_err += m
                    .iter()
                    .zip(r.iter().zip(g.iter()))
                    .map(|(&mv, (&a, &b))| mv as f64 * (a as f64 - b as f64).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let n = ids.len();
    let refs: Vec<&Gray> = ids.iter().map(|id| &reference.images[*id]).collect();
    let gens: Vec<&Gray> = ids.iter().map(|id| &generated.images[*id]).collect();
    let (fid_v, embedder) = if cfg.use_embedder {
        let e = RandomConvEmbedder::new(cfg.feature_seed)?;
        (Some(fid(&e.embed(&refs)?, &e.embed(&gens)?)?), Some(e.id()))
    } else {
        (None, None)
    };
    let (is_v, classifier) = if cfg.use_classifier {
        let c = RandomConvClassifier::new(cfg.feature_seed, cfg.classes)?;
        (Some(inception_score(&c.probabilities(&gens)?)?), Some(c.id()))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        fid: fid_v,
        is_score: is_v,
        psnr_db: psnr_sum / n as f64,
        ms_ssim: ssim_sum / n as f64,
        ms_ssim_scales: scales,
        n_samples: n,
        lesion_mse: if lesion_px > 0.0 { Some(lesion_err / lesion_px) } else { None },
        lesion_samples,
        embedder,
        classifier,
        config_hash: None,
        config: None,
    })
}
