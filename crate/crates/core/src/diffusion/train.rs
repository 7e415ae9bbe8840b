use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;

use super::ctrd::{alpha_at, ctrd_heatmap, ctrd_loss};
use super::noise::lfen_draw;
use super::schedule::forward_noise;
use super::{DiffusionModel, Stage};
use crate::data::PreparedSample;
use crate::error::{Error, Result};
use crate::nn;
use crate::raster::Rgb;
use crate::rng;
use crate::vae::Vae;

pub const DIFFUSION_CSV_HEADER: &str = "step,loss,mse,alpha";

/// Posterior means of `imgs` under the frozen encoder, `(N, C_z, h, w)`.
pub fn encode_latents(vae: &Vae, imgs: &[&crate::raster::Gray]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in imgs.chunks(16) {
        let y = nn::gray_batch(chunk, DType::F32)?;
        parts.push(vae.encode(&y)?.mean.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Everything one diffusion stage trains on.
pub struct DiffusionSet {
    /// Unscaled encoder means of the stage's targets.
    pub latents: Tensor,
    pub conditions: Vec<Rgb>,
    /// `(N, 1, h, w)` CTRD heatmaps, late stage only.
    pub heatmaps: Option<Tensor>,
}

impl DiffusionSet {
    /// Targets are early frames for [`Stage::Early`] and (registered) late
    /// frames for [`Stage::Late`]; heatmaps are built for the late stage when
    /// `with_heatmaps` is set.
    pub fn build(vae: &Vae, samples: &[PreparedSample], stage: Stage, with_heatmaps: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let targets: Vec<_> = samples
            .iter()
            .map(|s| match stage {
                Stage::Early => &s.early,
                Stage::Late => &s.late,
            })
            .collect();
        let latents = encode_latents(vae, &targets)?;
        let (_, _, h, w) = latents.dims4()?;
        let heatmaps = if stage == Stage::Late && with_heatmaps {
            let maps = samples
                .iter()
                .map(|s| {
                    ctrd_heatmap(&s.early, &s.late, (h, w))
                        .map_err(|e| Error::invalid(format!("sample {}: {e}", s.id)))
                        .map(|m| m.latent_res)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(nn::gray_batch(&maps.iter().collect::<Vec<_>>(), DType::F32)?)
        } else {
            None
        };
        Ok(DiffusionSet {
            latents,
            conditions: samples.iter().map(|s| s.condition.clone()).collect(),
            heatmaps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionRow {
    pub step: usize,
    /// The optimised objective (CTRD-weighted when enabled).
    pub loss: f64,
    /// Unweighted MSE of the same prediction.
    pub mse: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionLog {
    pub rows: Vec<DiffusionRow>,
}

impl DiffusionLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    /// Mean objective over the last ten steps.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.rows.len().min(10);
        if n == 0 {
            return None;
        }
        Some(self.rows[self.rows.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = format!("{DIFFUSION_CSV_HEADER}\n");
        for r in &self.rows {
            text.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.mse, r.alpha));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place on one stage.
///
/// For [`Stage::Early`] the latent scale is fitted to the data
/// (`1 / std`); the late stage keeps the scale it inherited.
pub fn train_diffusion(model: &mut DiffusionModel, data: &DiffusionSet, stage: Stage, seed: u64) -> Result<DiffusionLog> {
    let cfg = model.config.clone();
    if stage == Stage::Early {
        let std = nn::scalar(&data.latents.flatten_all()?.var(0)?)?.sqrt();
        if !(std.is_finite() && std > 1e-8) {
            return Err(Error::Numerical(format!("latent std is {std}")));
        }
        model.latent_scale = 1.0 / std;
    }
    let use_ctrd = cfg.use_ctrd && stage == Stage::Late;
    if use_ctrd && data.heatmaps.is_none() {
        return Err(Error::invalid("CTRD enabled but no heatmaps were built"));
    }
    let latents = (&data.latents * model.latent_scale)?;
    let n = latents.dims()[0];
    let shape = latents.dims()[1..].to_vec();
    let schedule = cfg.schedule()?;
    let alpha_cfg = cfg.alpha_config();
    let mut opt = nn::adam(model.store.trainable(&["unet."]), cfg.lr)?;
    let mut r = rng::stream(seed, &format!("diffusion:{}", stage.checkpoint_kind()));
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch_size).map(|_| r.gen_range(0..n as u32)).collect();
        let ids = Tensor::new(idx.as_slice(), latents.device())?;
        let y0 = latents.index_select(&ids, 0)?;
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| r.gen_range(0..schedule.len())).collect();
        let mut eps = Vec::with_capacity(cfg.batch_size);
        let mut total = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let d = lfen_draw(&mut r, &shape, cfg.lfen_beta_std, cfg.use_lfen, DType::F32)?;
            total.push(d.total()?);
            eps.push(d.eps);
        }
        let noise = Tensor::stack(&total, 0)?;
        let target = if cfg.predict_total_noise { noise.clone() } else { Tensor::stack(&eps, 0)? };
        let y_t = forward_noise(&y0, &ts, &noise, &schedule)?;
        let conds: Vec<&Rgb> = idx.iter().map(|&i| &data.conditions[i as usize]).collect();
        let hint = model.unet.hint(&nn::rgb_batch(&conds, DType::F32)?)?;
        let pred = model.unet.forward(&y_t, &ts, Some(&hint))?;
        let alpha = alpha_at(step - 1, cfg.steps, &alpha_cfg);
        let mse = nn::mse(&pred, &target)?;
        let loss = match (&data.heatmaps, use_ctrd) {
            (Some(maps), true) => ctrd_loss(&pred, &target, &maps.index_select(&ids, 0)?, alpha)?,
            _ => mse.clone(),
        };
        let lv = nn::scalar(&loss)?;
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss is {lv} at step {step}")));
        }
        opt.backward_step(&loss)?;
        log::debug!("diffusion {} step {step}: loss {lv:.5}", stage.checkpoint_kind());
        rows.push(DiffusionRow {
            step,
            loss: lv,
            mse: nn::scalar(&mse)?,
            alpha: if use_ctrd { alpha } else { 0.0 },
        });
    }
    Ok(DiffusionLog { rows })
}
