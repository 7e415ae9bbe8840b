//! Run configuration: one TOML file holding every hyperparameter plus the
//! ablation switches. The resolved config is snapshotted into checkpoints and
//! reports together with its hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{AlphaMode, DiffusionConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::preprocess::PreprocessOptions;
use crate::synthdata::SynthOptions;
use crate::vae::VaeConfig;

/// Component switches. Each ablation corresponds to flipping exactly one of
/// these away from its default:
///
/// | ablation          | setting                         |
/// |-------------------|---------------------------------|
/// | w/o GM            | `use_gate_module = false`       |
/// | w/o GCE           | `use_gce = false`               |
/// | w/o CTRD loss     | `use_ctrd = false`              |
/// | alpha = 0.25      | `ctrd_alpha_mode = "fixed_0.25"`|
/// | alpha = 1         | `ctrd_alpha_mode = "fixed_1.0"` |
/// | w/o LFEN          | `use_lfen = false`              |
/// | w/o sharpening    | `use_image_sharpening = false`  |
/// | w/o registration  | `use_registration = false`      |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_gate_module: bool,
    pub use_gce: bool,
    pub use_ctrd: bool,
    pub ctrd_alpha_mode: AlphaMode,
    pub use_lfen: bool,
    pub use_image_sharpening: bool,
    pub use_registration: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_gate_module: true,
            use_gce: true,
            use_ctrd: true,
            ctrd_alpha_mode: AlphaMode::Ramp,
            use_lfen: true,
            use_image_sharpening: true,
            use_registration: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    pub misalign_strength: f64,
    pub max_lesions: usize,
    pub healthy_fraction: f64,
    /// Augmented copies added per training sample (rotation and flip).
    pub augment_copies: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthOptions::default();
        DataConfig {
            train: 256,
            test: 64,
            misalign_strength: s.misalign_strength,
            max_lesions: s.max_lesions,
            healthy_fraction: s.healthy_fraction,
            augment_copies: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseReportConfig {
    pub size: usize,
    pub draws: usize,
}

impl Default for NoiseReportConfig {
    fn default() -> Self {
        NoiseReportConfig { size: 16, draws: 1000 }
    }
}

/// Everything a run needs. Ablation switches override the matching fields of
/// the `vae`, `diffusion` and `preprocess` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Square image size in pixels; must be a multiple of 32.
    pub resolution: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub ablation: Ablation,
    pub preprocess: PreprocessOptions,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub evaluate: EvalConfig,
    pub noise_report: NoiseReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            resolution: 64,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            ablation: Ablation::default(),
            preprocess: PreprocessOptions::default(),
            vae: VaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            evaluate: EvalConfig::default(),
            noise_report: NoiseReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 32 != 0 {
            return Err(Error::invalid(format!("resolution {} is not a positive multiple of 32", self.resolution)));
        }
        if self.data.train == 0 || self.data.test == 0 {
            return Err(Error::invalid("data.train and data.test must be positive"));
        }
        self.vae.validate()?;
        self.diffusion.validate()
    }

    /// Copies the ablation switches into the module sections.
    pub fn resolved(mut self) -> Self {
        let a = &self.ablation;
        self.vae.use_gate_module = a.use_gate_module;
        self.vae.use_gce = a.use_gce;
        self.diffusion.use_ctrd = a.use_ctrd;
        self.diffusion.ctrd_alpha_mode = a.ctrd_alpha_mode;
        self.diffusion.use_lfen = a.use_lfen;
        self.preprocess.sharpen = a.use_image_sharpening;
        self.preprocess.register = a.use_registration;
        self
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            size: (self.resolution, self.resolution),
            misalign_strength: self.data.misalign_strength,
            max_lesions: self.data.max_lesions,
            healthy_fraction: self.data.healthy_fraction,
        }
    }

    /// Which preprocessing outputs training and sampling read.
    pub fn load_options(&self) -> crate::data::LoadOptions {
        crate::data::LoadOptions {
            sharpened: self.ablation.use_image_sharpening,
            registered: self.ablation.use_registration,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let d = Sha256::digest(&json);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_overrides() {
        let c = RunConfig::default().resolved();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let text = "seed = 3\n[ablation]\nuse_gce = false\nctrd_alpha_mode = \"fixed_1.0\"\n[vae]\nuse_gce = true\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert!(!c.vae.use_gce);
        assert_eq!(c.diffusion.ctrd_alpha_mode, AlphaMode::Fixed1);
        assert_eq!(c.seed, 3);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("resolution = 48").is_err());
        for nested in ["[diffusion]\nt_steps = 20", "[vae]\nstep = 3", "[preprocess.registration]\nblur = 1.0"] {
            assert!(RunConfig::from_toml(nested).is_err(), "{nested}");
        }
        assert_eq!(RunConfig::from_toml("[diffusion]\nT = 20\nsample_steps = 5").unwrap().diffusion.t_steps, 20);
    }

    #[test]
    fn every_switch_changes_the_hash() {
        let base = RunConfig::default().resolved();
        let flips: Vec<fn(&mut Ablation)> = vec![
            |a| a.use_gate_module = false,
            |a| a.use_gce = false,
            |a| a.use_ctrd = false,
            |a| a.ctrd_alpha_mode = AlphaMode::Fixed025,
            |a| a.ctrd_alpha_mode = AlphaMode::Fixed1,
            |a| a.use_lfen = false,
            |a| a.use_image_sharpening = false,
            |a| a.use_registration = false,
        ];
        let mut seen = std::collections::HashSet::new();
        seen.insert(base.hash());
        for f in flips {
            let mut c = base.clone();
            f(&mut c.ablation);
            assert!(seen.insert(c.resolved().hash()));
        }
    }
}
