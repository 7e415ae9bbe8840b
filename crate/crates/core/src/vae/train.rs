use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;

use super::{
    discriminator_loss, sample_latent, vae_loss, BackbonePhases, LatentDistribution, RandomConvFeatures, Vae,
    VaeConfig, VaeLossBreakdown,
};
use crate::data::PreparedSample;
use crate::error::{Error, Result};
use crate::nn::{self, Checkpoint};
use crate::raster::{Gray, Rgb};
use crate::rng;

pub const LOSS_CSV_HEADER: &str = "step,recon_l2,adversarial,perceptual,kl,total,disc_loss";

/// Targets with their conditions, plus the held-out probe batch.
pub struct TrainingImages {
    pub targets: Vec<Gray>,
    pub conditions: Vec<Rgb>,
    pub probe_targets: Vec<Gray>,
    pub probe_conditions: Vec<Rgb>,
}

impl TrainingImages {
    /// Late frames (and early frames with [`BackbonePhases::Both`]) from
    /// `train`; the probe takes the late frames of the first `probe_size`
    /// held-out samples.
    pub fn new(train: &[PreparedSample], held_out: &[PreparedSample], phases: BackbonePhases, probe_size: usize) -> Self {
        let mut targets = Vec::new();
        let mut conditions = Vec::new();
        for s in train {
            targets.push(s.late.clone());
            conditions.push(s.condition.clone());
            if phases == BackbonePhases::Both {
                targets.push(s.early.clone());
                conditions.push(s.condition.clone());
            }
        }
        let probe: Vec<_> = held_out.iter().take(probe_size).collect();
        TrainingImages {
            targets,
            conditions,
            probe_targets: probe.iter().map(|s| s.late.clone()).collect(),
            probe_conditions: probe.iter().map(|s| s.condition.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: VaeLossBreakdown,
    pub disc_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
    /// Probe reconstruction MSE before the first update.
    pub probe_before: f64,
    /// Probe reconstruction MSE after the last update (conditioned in the GCE phase).
    pub probe_after: f64,
    /// GCE phase only: the same probe decoded without the pyramid.
    pub probe_unconditioned: Option<f64>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss.total)
    }

    /// Mean total over the last ten steps.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.rows.len().min(10);
        if n == 0 {
            return None;
        }
        Some(self.rows[self.rows.len() - n..].iter().map(|r| r.loss.total).sum::<f64>() / n as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = format!("{LOSS_CSV_HEADER}\n");
        for r in &self.rows {
            let l = &r.loss;
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, l.recon_l2, l.adversarial, l.perceptual, l.kl, l.total, r.disc_loss
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn batch(imgs: &TrainingImages, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let y: Vec<&Gray> = idx.iter().map(|&i| &imgs.targets[i]).collect();
    let x: Vec<&Rgb> = idx.iter().map(|&i| &imgs.conditions[i]).collect();
    Ok((nn::gray_batch(&y, DType::F32)?, nn::rgb_batch(&x, DType::F32)?))
}

/// Reconstruction MSE of the probe through the posterior means.
fn probe_recon(vae: &Vae, imgs: &TrainingImages, conditioned: bool) -> Result<f64> {
    if imgs.probe_targets.is_empty() {
        return Ok(f64::NAN);
    }
    let y = nn::gray_batch(&imgs.probe_targets.iter().collect::<Vec<_>>(), DType::F32)?;
    let pyramid = if conditioned {
        let x = nn::rgb_batch(&imgs.probe_conditions.iter().collect::<Vec<_>>(), DType::F32)?;
        vae.condition(&x)?
    } else {
        None
    };
    let z = vae.encode(&y)?.mean;
    nn::scalar(&nn::mse(&vae.decode(&z, pyramid.as_ref())?, &y)?)
}

fn check_images(imgs: &TrainingImages) -> Result<()> {
    if imgs.targets.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    Ok(())
}

/// One generator step, then one discriminator step on the detached output.
#[allow(clippy::too_many_arguments)]
fn step(
    vae: &Vae,
    perceptual: &RandomConvFeatures,
    y: &Tensor,
    x: Option<&Tensor>,
    noise_seed: u64,
    with_kl: bool,
    opt_g: &mut candle_nn::AdamW,
    opt_d: Option<&mut candle_nn::AdamW>,
) -> Result<(VaeLossBreakdown, f64)> {
    let cfg = &vae.config;
    let dist: LatentDistribution = vae.encode(y)?;
    let mut z = sample_latent(&dist, noise_seed)?;
    if !with_kl {
        // Frozen encoder: nothing upstream of z needs a gradient.
        z = z.detach();
    }
    let pyramid = match x {
        Some(x) => vae.condition(x)?,
        None => None,
    };
    let y_hat = vae.decode(&z, pyramid.as_ref())?;
    let fake = vae.disc.forward(&y_hat)?;
    let (total, b) = vae_loss(
        y,
        &y_hat,
        &fake,
        if with_kl { Some(&dist) } else { None },
        perceptual,
        &cfg.weights,
        cfg.literal_adversarial,
    )?;
    opt_g.backward_step(&total)?;
    let d_loss = discriminator_loss(&vae.disc.forward(y)?, &vae.disc.forward(&y_hat.detach())?)?;
    let dl = nn::scalar(&d_loss)?;
    if !dl.is_finite() {
        return Err(Error::Numerical(format!("discriminator loss is {dl}")));
    }
    if let Some(opt_d) = opt_d {
        opt_d.backward_step(&d_loss)?;
    }
    Ok((b, dl))
}

fn draw_batch<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.gen_range(0..n)).collect()
}

/// Alternating generator/discriminator training of encoder, decoder and
/// discriminator. Gated branch parameters are created but never updated.
pub fn train_vae_backbone(imgs: &TrainingImages, cfg: &VaeConfig, seed: u64) -> Result<(Vae, TrainLog)> {
    check_images(imgs)?;
    let vae = Vae::new(cfg, seed, DType::F32)?;
    let perceptual = RandomConvFeatures::new(DType::F32)?;
    let mut opt_g = nn::adam(vae.store.trainable(&["encoder.", "decoder."]), cfg.lr)?;
    let mut opt_d = nn::adam(vae.store.trainable(&["disc."]), cfg.disc_lr)?;
    let mut rng = rng::stream(seed, "vae:batches");
    let probe_before = probe_recon(&vae, imgs, false)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let idx = draw_batch(&mut rng, imgs.targets.len(), cfg.batch_size);
        let (y, _) = batch(imgs, &idx)?;
        let (loss, disc_loss) = step(&vae, &perceptual, &y, None, rng.gen(), true, &mut opt_g, Some(&mut opt_d))?;
        log::debug!("vae step {s}: total {:.5} recon {:.5}", loss.total, loss.recon_l2);
        rows.push(LossRow { step: s, loss, disc_loss });
    }
    let probe_after = probe_recon(&vae, imgs, false)?;
    Ok((
        vae,
        TrainLog {
            rows,
            probe_before,
            probe_after,
            probe_unconditioned: None,
        },
    ))
}

/// Trains the gated encoder and fusion projections (and keeps training the
/// discriminator) against a frozen encoder/decoder. The KL term is dropped.
///
/// Backbone architecture comes from the checkpoint; gated-branch settings and
/// optimiser settings come from `cfg`.
pub fn train_gce(imgs: &TrainingImages, backbone: &Checkpoint, cfg: &VaeConfig, seed: u64) -> Result<(Vae, TrainLog)> {
    check_images(imgs)?;
    if !cfg.use_gce {
        return Err(Error::invalid("GCE training requested with use_gce = false"));
    }
    let base: VaeConfig = backbone.config_as()?;
    let merged = VaeConfig {
        channels: base.channels,
        latent_channels: base.latent_channels,
        disc_channels: base.disc_channels,
        ..cfg.clone()
    };
    let vae = Vae::new(&merged, seed, DType::F32)?;
    for (name, t) in &backbone.tensors {
        if ["encoder.", "decoder.", "disc."].iter().any(|p| name.starts_with(p)) {
            vae.store.set(name, t)?;
        }
    }
    let frozen_hash = vae.backbone_hash()?;
    let perceptual = RandomConvFeatures::new(DType::F32)?;
    let mut opt_g = nn::adam(vae.store.trainable(&["gce.", "fuse."]), cfg.gce_lr)?;
    let mut rng = rng::stream(seed, "gce:batches");
    let probe_before = probe_recon(&vae, imgs, true)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let idx = draw_batch(&mut rng, imgs.targets.len(), cfg.batch_size);
        let (y, x) = batch(imgs, &idx)?;
        let (loss, disc_loss) = step(&vae, &perceptual, &y, Some(&x), rng.gen(), false, &mut opt_g, None)?;
        log::debug!("gce step {s}: total {:.5} recon {:.5}", loss.total, loss.recon_l2);
        rows.push(LossRow { step: s, loss, disc_loss });
    }
    if vae.backbone_hash()? != frozen_hash {
        return Err(Error::Numerical("backbone parameters changed during GCE training".into()));
    }
    let probe_after = probe_recon(&vae, imgs, true)?;
    let probe_unconditioned = Some(probe_recon(&vae, imgs, false)?);
    Ok((
        vae,
        TrainLog {
            rows,
            probe_before,
            probe_after,
            probe_unconditioned,
        },
    ))
}
