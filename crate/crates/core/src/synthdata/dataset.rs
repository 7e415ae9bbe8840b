//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/{train,test}/<id>/slo.png | early.png | late.png | lesion_mask.png | meta.json
//! ```
//!
//! Preprocessing later adds `slo_sharpened.png`, `late_registered.png` and
//! `registration.json` beside each sample.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_triplet, LesionSpec, PairedTriplet};
use super::vessels::generate_vessel_tree;
use crate::error::{Error, Result};
use crate::geometry::{Homography, HomographyRecord};
use crate::raster;
use crate::rng;

pub const MANIFEST_FORMAT: &str = "angiogen-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// `(height, width)` in pixels.
    pub size: (usize, usize),
    pub misalign_strength: f64,
    pub max_lesions: usize,
    /// Probability that a sample has no lesions at all.
    pub healthy_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            size: (64, 64),
            misalign_strength: 4.0,
            max_lesions: 3,
            healthy_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub root_seed: u64,
    pub options: SynthOptions,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format(&path, format!("unknown format {:?}", m.format)));
        }
        Ok(m)
    }

    pub fn samples<'a>(&'a self, root: &'a Path, split: Split) -> impl Iterator<Item = SampleDir> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(move |e| SampleDir {
                id: e.id.clone(),
                seed: e.seed,
                dir: root.join(split.dir_name()).join(&e.id),
            })
    }
}

/// Per-sample metadata written as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    /// Row-major 3×3 misalignment, exact decimal strings.
    pub homography: HomographyRecord,
    pub disc_center: (f64, f64),
    pub lesions: LesionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDir {
    pub id: String,
    pub seed: u64,
    pub dir: PathBuf,
}

impl SampleDir {
    pub fn slo(&self) -> PathBuf {
        self.dir.join("slo.png")
    }
    pub fn slo_sharpened(&self) -> PathBuf {
        self.dir.join("slo_sharpened.png")
    }
    pub fn early(&self) -> PathBuf {
        self.dir.join("early.png")
    }
    pub fn late(&self) -> PathBuf {
        self.dir.join("late.png")
    }
    pub fn late_registered(&self) -> PathBuf {
        self.dir.join("late_registered.png")
    }
    pub fn lesion_mask(&self) -> PathBuf {
        self.dir.join("lesion_mask.png")
    }
    pub fn meta(&self) -> PathBuf {
        self.dir.join("meta.json")
    }
    pub fn registration(&self) -> PathBuf {
        self.dir.join("registration.json")
    }

    pub fn load_meta(&self) -> Result<SampleMeta> {
        let p = self.meta();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e))
    }

    /// Loads the raw triplet as written by [`build_dataset`].
    pub fn load_triplet(&self) -> Result<PairedTriplet> {
        let meta = self.load_meta()?;
        let mask_path = self.lesion_mask();
        let lesion_mask = if mask_path.exists() {
            Some(raster::load_gray_png(&mask_path)?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
        } else {
            None
        };
        Ok(PairedTriplet {
            slo: raster::load_rgb_png(&self.slo())?,
            early: raster::load_gray_png(&self.early())?,
            late: raster::load_gray_png(&self.late())?,
            lesion_mask,
            misalignment: Some(Homography::try_from(&meta.homography)?),
            seed: meta.seed,
        })
    }
}

/// Seed of the `index`-th sample; distinct for distinct indices by construction.
pub fn sample_seed(root_seed: u64, index: u64) -> u64 {
    (root_seed << 32) | (index & 0xffff_ffff)
}

/// Generates one synthetic triplet from its seed.
pub fn synth_sample(seed: u64, opts: &SynthOptions) -> Result<(PairedTriplet, SampleMeta)> {
    let vmap = generate_vessel_tree(seed, opts.size)?;
    let mut r = rng::stream(seed, "lesion-count");
    let count = if r.gen_bool(opts.healthy_fraction.clamp(0.0, 1.0)) || opts.max_lesions == 0 {
        0
    } else {
        r.gen_range(1..=opts.max_lesions)
    };
    let lesions = LesionSpec::random(seed, opts.size, count, false);
    let t = render_triplet(&vmap, &lesions, opts.misalign_strength, seed)?;
    let meta = SampleMeta {
        seed,
        homography: HomographyRecord::from(&t.misalignment.unwrap_or_default()),
        disc_center: vmap.disc_center,
        lesions,
    };
    Ok((t, meta))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_sample(dir: &Path, t: &PairedTriplet, meta: &SampleMeta) -> Result<()> {
    create_dir(dir)?;
    raster::save_rgb_png(&dir.join("slo.png"), &t.slo)?;
    raster::save_gray_png(&dir.join("early.png"), &t.early)?;
    raster::save_gray_png(&dir.join("late.png"), &t.late)?;
    if let Some(m) = &t.lesion_mask {
        raster::save_gray_png(&dir.join("lesion_mask.png"), m)?;
    }
    write_json(&dir.join("meta.json"), meta)
}

/// Writes `n_train + n_test` triplets plus `manifest.json` under `out_dir`.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    root_seed: u64,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<Manifest> {
    create_dir(out_dir)?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let seed = sample_seed(root_seed, i as u64);
        let id = format!("{i:05}");
        let (t, meta) = synth_sample(seed, opts)?;
        write_sample(&out_dir.join(split.dir_name()).join(&id), &t, &meta)?;
        entries.push(ManifestEntry { id, split, seed });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        root_seed,
        options: opts.clone(),
        entries,
    };
    write_json(&Manifest::path(out_dir), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_splits_and_disjoint_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(6, 3, 1, dir.path(), &SynthOptions::default()).unwrap();
        assert_eq!(m.entries.len(), 9);
        assert_eq!(m.entries.iter().filter(|e| e.split == Split::Train).count(), 6);
        let train: HashSet<u64> = m.samples(dir.path(), Split::Train).map(|s| s.seed).collect();
        let test: HashSet<u64> = m.samples(dir.path(), Split::Test).map(|s| s.seed).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(2, 1, 5, a.path(), &SynthOptions::default()).unwrap();
        build_dataset(2, 1, 5, b.path(), &SynthOptions::default()).unwrap();
        for f in ["slo.png", "early.png", "late.png", "lesion_mask.png", "meta.json"] {
            let x = fs::read(a.path().join("test/00002").join(f)).unwrap();
            let y = fs::read(b.path().join("test/00002").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        assert_eq!(
            fs::read(Manifest::path(a.path())).unwrap(),
            fs::read(Manifest::path(b.path())).unwrap()
        );
    }

    #[test]
    fn load_round_trips_homography_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(1, 0, 3, dir.path(), &SynthOptions::default()).unwrap();
        let s = m.samples(dir.path(), Split::Train).next().unwrap();
        let (t, _) = synth_sample(s.seed, &m.options).unwrap();
        let loaded = s.load_triplet().unwrap();
        assert_eq!(loaded.misalignment, t.misalignment);
        assert_eq!(loaded.early, raster::quantize(&t.early));
    }

    #[test]
    fn unwritable_root_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, b"x").unwrap();
        let err = build_dataset(1, 0, 1, &file.join("sub"), &SynthOptions::default()).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.starts_with(&file)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
