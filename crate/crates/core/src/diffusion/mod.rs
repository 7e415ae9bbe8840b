//! Latent diffusion: noise schedule, low-frequency-enhanced forward noise
//! (LFEN), the cross-temporal regional difference (CTRD) weighting, the
//! conditional noise-prediction U-Net and the ancestral sampler.

mod ctrd;
mod noise;
mod sample;
mod schedule;
mod train;
mod unet;

pub use ctrd::{alpha_at, ctrd_heatmap, ctrd_loss, AlphaMode, CtrdWeightConfig, DifferenceHeatmap};
pub use noise::{
    batch_noise, lfen_draw, lfen_sample, noise_report, noise_stats, LfenDraw, NoiseReport, NoiseStats,
    DEFAULT_BETA_STD,
};
pub use sample::{ddpm_sample, NoisePredictor, SamplerOptions};
pub use schedule::{forward_noise, make_schedule, recover_y0, NoiseSchedule};
pub use train::{encode_latents, train_diffusion, DiffusionLog, DiffusionRow, DiffusionSet, DIFFUSION_CSV_HEADER};
pub use unet::{Hint, UNet};

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Checkpoint, ParamStore};
use crate::raster::{Gray, Rgb};
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Late,
}

impl Stage {
    pub fn checkpoint_kind(self) -> &'static str {
        match self {
            Stage::Early => "diffusion-early",
            Stage::Late => "diffusion-late",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub base_channels: usize,
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub use_lfen: bool,
    pub lfen_beta_std: f64,
    /// Regress the full injected noise (white plus offset) rather than the
    /// white part alone.
    pub predict_total_noise: bool,
    pub use_ctrd: bool,
    pub ctrd_alpha_mode: AlphaMode,
    pub alpha: CtrdWeightConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sample_steps: usize,
    /// Draw the sampler's initial and per-step noise with LFEN.
    pub sample_lfen: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            base_channels: 32,
            t_steps: 200,
            beta_min: 5e-4,
            beta_max: 0.1,
            use_lfen: true,
            lfen_beta_std: DEFAULT_BETA_STD,
            predict_total_noise: true,
            use_ctrd: true,
            ctrd_alpha_mode: AlphaMode::Ramp,
            alpha: CtrdWeightConfig::default(),
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            sample_steps: 50,
            sample_lfen: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)?;
        self.alpha.validate()?;
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::invalid("base_channels and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_steps {
            return Err(Error::invalid(format!("sample_steps must be in 1..={}", self.t_steps)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)
    }

    /// Alpha ramp after applying `ctrd_alpha_mode`.
    pub fn alpha_config(&self) -> CtrdWeightConfig {
        CtrdWeightConfig::for_mode(self.ctrd_alpha_mode, self.alpha)
    }
}

/// Noise-prediction network plus what sampling needs besides weights.
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub store: ParamStore,
    pub unet: UNet,
    pub latent_channels: usize,
    /// Multiplies encoder means so the training latents have unit variance.
    pub latent_scale: f64,
}

impl DiffusionModel {
    pub fn new(config: &DiffusionConfig, latent_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32);
        let unet = UNet::new(&store.root().sub("unet"), latent_channels, config.base_channels)?;
        Ok(DiffusionModel {
            config: config.clone(),
            store,
            unet,
            latent_channels,
            latent_scale: 1.0,
        })
    }

    pub fn checkpoint(&self, stage: Stage, step: usize) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store, &[""], stage.checkpoint_kind(), step, &self.config)?;
        ck.extra.insert("latent_scale".into(), serde_json::json!(self.latent_scale));
        ck.extra.insert("latent_channels".into(), serde_json::json!(self.latent_channels));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: DiffusionConfig = ck.config_as()?;
        let get = |k: &str| {
            ck.extra
                .get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::invalid(format!("diffusion checkpoint lacks {k}")))
        };
        let mut m = DiffusionModel::new(&cfg, get("latent_channels")? as usize, 0)?;
        m.latent_scale = get("latent_scale")?;
        ck.load_into(&m.store)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copies every parameter of `other` (same architecture) into this model.
    pub fn copy_weights_from(&mut self, other: &DiffusionModel) -> Result<()> {
        for (name, t) in other.store.named_tensors("") {
            self.store.set(&name, &t)?;
        }
        self.latent_scale = other.latent_scale;
        Ok(())
    }
}

/// The network bound to one condition's cached hint.
pub struct ConditionedUNet<'a> {
    pub unet: &'a UNet,
    pub hint: Option<Hint>,
}

impl NoisePredictor for ConditionedUNet<'_> {
    fn predict(&self, y_t: &Tensor, t: usize) -> Result<Tensor> {
        let b = y_t.dims()[0];
        self.unet.forward(y_t, &vec![t; b], self.hint.as_ref())
    }
}

/// Samples a late-phase image for each condition. Every image has its own
/// noise stream keyed by `(seed, index)`, so results do not depend on which
/// other conditions are in the call.
pub fn generate(vae: &Vae, model: &DiffusionModel, conditions: &[&Rgb], seed: u64) -> Result<Vec<Gray>> {
    let cfg = &model.config;
    let schedule = cfg.schedule()?;
    let mut out = Vec::with_capacity(conditions.len());
    for (i, cond) in conditions.iter().enumerate() {
        let x = nn::rgb_batch(&[*cond], DType::F32)?;
        let (_, _, h, w) = x.dims4()?;
        let hint = model.unet.hint(&x)?;
        let pred = ConditionedUNet { unet: &model.unet, hint: Some(hint) };
        let opts = SamplerOptions {
            steps: cfg.sample_steps,
            seed: crate::rng::derive(seed, &format!("sample:{i}")),
            lfen: cfg.sample_lfen && cfg.use_lfen,
            beta_std: cfg.lfen_beta_std,
        };
        let z = ddpm_sample(&pred, &[1, model.latent_channels, h / 8, w / 8], &schedule, &opts, DType::F32)?;
        let z = (z / model.latent_scale)?;
        let pyramid = vae.condition(&x)?;
        let img = vae.decode(&z, pyramid.as_ref())?.clamp(0f32, 1f32)?;
        out.extend(nn::to_grays(&img)?);
    }
    Ok(out)
}
