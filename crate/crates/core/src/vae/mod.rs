//! KL-regularised image autoencoder for the angiogram frames, the gated
//! convolutional encoder (GCE) that injects condition features into its
//! decoder, the patch discriminator, and their losses.

mod model;
mod train;

pub use model::{Decoder, Discriminator, Encoder, FeatureExtractor, Fusion, Gce, RandomConvFeatures, PERCEPTUAL_SEED};
pub use train::{train_gce, train_vae_backbone, LossRow, TrainLog, TrainingImages, LOSS_CSV_HEADER};

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, softplus, Checkpoint, ParamStore};

pub const VAE_CHECKPOINT_KIND: &str = "vae";
pub const GCE_CHECKPOINT_KIND: &str = "gce";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            adversarial: 0.05,
            perceptual: 0.1,
            kl: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePhases {
    /// Early and late frames.
    Both,
    LateOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Channel width of each Down block (Up blocks mirror them).
    pub channels: [usize; 3],
    pub latent_channels: usize,
    pub gce_channels: [usize; 3],
    pub disc_channels: [usize; 4],
    pub use_gce: bool,
    pub use_gate_module: bool,
    /// Wrap the gated product in a second sigmoid.
    pub double_activation: bool,
    /// Use `log(1 - D(G))` for the generator instead of `-log D(G)`.
    pub literal_adversarial: bool,
    pub weights: LossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub gce_lr: f64,
    pub phases: BackbonePhases,
    /// Held-out images used for the before/after reconstruction probe.
    pub probe_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            channels: [8, 16, 32],
            latent_channels: 4,
            gce_channels: [8, 16, 32],
            disc_channels: [16, 32, 64, 64],
            use_gce: true,
            use_gate_module: true,
            double_activation: false,
            literal_adversarial: false,
            weights: LossWeights::default(),
            steps: 200,
            batch_size: 4,
            lr: 2e-3,
            disc_lr: 2e-4,
            gce_lr: 2e-4,
            phases: BackbonePhases::Both,
            probe_size: 8,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.gce_channels.contains(&0) || self.disc_channels.contains(&0) {
            return Err(Error::invalid("vae channel counts must be positive"));
        }
        if self.latent_channels == 0 || self.batch_size == 0 {
            return Err(Error::invalid("latent_channels and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0 && self.gce_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent grid, tensors `(B, C_z, H/8, W/8)`.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Latent sample `mean + exp(logvar / 2) * n` with `n` seeded by `seed`.
pub fn sample_latent(d: &LatentDistribution, seed: u64) -> Result<Tensor> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = nn::randn(&mut rng, d.mean.dims(), d.mean.dtype())?;
    Ok((&d.mean + (d.logvar.affine(0.5, 0.0)?.exp()? * n)?)?)
}

/// Gated features at H/2, H/4, H/8.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn zeros_like(&self) -> Result<Self> {
        Ok(FeaturePyramid {
            levels: self.levels.iter().map(|l| l.zeros_like()).collect::<candle_core::Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub recon_l2: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub total: f64,
}

/// `-1/2 * mean(1 + logvar - mean^2 - exp(logvar))`.
pub fn kl_loss(d: &LatentDistribution) -> Result<Tensor> {
    let inner = ((d.logvar.affine(1.0, 1.0)? - d.mean.sqr()?)? - d.logvar.exp()?)?;
    Ok(inner.mean_all()?.affine(-0.5, 0.0)?)
}

/// Generator adversarial term on fake logits: `softplus(-f)` (non-saturating)
/// or the literal `log(1 - sigmoid(f)) = -softplus(f)`.
pub fn adversarial_loss(fake_logits: &Tensor, literal: bool) -> Result<Tensor> {
    if literal {
        Ok(softplus(fake_logits)?.mean_all()?.neg()?)
    } else {
        Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
    }
}

/// `log sigmoid(real) + log(1 - sigmoid(fake))`, the quantity the
/// discriminator maximises. Equals `2 log(1/2)` at zero logits.
pub fn discriminator_objective(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let a = softplus(&real_logits.neg()?)?.mean_all()?;
    let b = softplus(fake_logits)?.mean_all()?;
    Ok((a + b)?.neg()?)
}

/// Discriminator loss to minimise, `-discriminator_objective`. Non-negative
/// with infimum 0 as real logits go to +inf and fake logits to -inf.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok(discriminator_objective(real_logits, fake_logits)?.neg()?)
}

/// The discriminator expression with the signs exactly as printed:
/// `log(1 - sigmoid(real)) + log sigmoid(fake)`. Kept for comparison only;
/// minimising it trains the discriminator backwards.
pub fn discriminator_loss_as_printed(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let a = softplus(real_logits)?.mean_all()?;
    let b = softplus(&fake_logits.neg()?)?.mean_all()?;
    Ok((a + b)?.neg()?)
}

/// Mean over layers of the per-layer feature MSE.
pub fn perceptual_loss(fx: &dyn FeatureExtractor, y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    let a = fx.features(y)?;
    let b = fx.features(y_hat)?;
    let mut acc: Option<Tensor> = None;
    for (fa, fb) in a.iter().zip(&b) {
        let m = nn::mse(fa, fb)?;
        acc = Some(match acc {
            Some(s) => (s + m)?,
            None => m,
        });
    }
    let n = a.len().max(1) as f64;
    match acc {
        Some(s) => Ok((s / n)?),
        None => Ok(Tensor::zeros((), y.dtype(), y.device())?),
    }
}

/// Differentiable total plus the scalar breakdown. `dist = None` drops the KL
/// term (reported as 0).
pub fn vae_loss(
    y: &Tensor,
    y_hat: &Tensor,
    fake_logits: &Tensor,
    dist: Option<&LatentDistribution>,
    perceptual: &dyn FeatureExtractor,
    weights: &LossWeights,
    literal_adversarial: bool,
) -> Result<(Tensor, VaeLossBreakdown)> {
    if y.dims() != y_hat.dims() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", y.dims(), y_hat.dims())));
    }
    let recon = nn::mse(y, y_hat)?;
    let adv = adversarial_loss(fake_logits, literal_adversarial)?;
    let perc = perceptual_loss(perceptual, y, y_hat)?;
    let mut total = ((recon.affine(weights.recon, 0.0)? + adv.affine(weights.adversarial, 0.0)?)?
        + perc.affine(weights.perceptual, 0.0)?)?;
    let kl = match dist {
        Some(d) => {
            let kl = kl_loss(d)?;
            total = (total + kl.affine(weights.kl, 0.0)?)?;
            nn::scalar(&kl)?
        }
        None => 0.0,
    };
    let b = VaeLossBreakdown {
        recon_l2: nn::scalar(&recon)?,
        adversarial: nn::scalar(&adv)?,
        perceptual: nn::scalar(&perc)?,
        kl,
        total: nn::scalar(&total)?,
    };
    for (name, v) in [
        ("recon_l2", b.recon_l2),
        ("adversarial", b.adversarial),
        ("perceptual", b.perceptual),
        ("kl", b.kl),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("vae loss term {name} is {v}")));
        }
    }
    Ok((total, b))
}

/// Backbone, optional GCE branch and discriminator over one parameter store.
///
/// Parameter prefixes: `encoder.`, `decoder.`, `gce.`, `fuse.`, `disc.`.
pub struct Vae {
    pub config: VaeConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub gce: Option<(Gce, Fusion)>,
    pub disc: Discriminator,
}

impl Vae {
    pub fn new(config: &VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let encoder = Encoder::new(&root.sub("encoder"), config)?;
        let decoder = Decoder::new(&root.sub("decoder"), config)?;
        let gce = if config.use_gce {
            Some((
                Gce::new(&root.sub("gce"), config)?,
                Fusion::new(&root.sub("fuse"), config, decoder.up_in())?,
            ))
        } else {
            None
        };
        let disc = Discriminator::new(&root.sub("disc"), config)?;
        Ok(Vae {
            config: config.clone(),
            store,
            encoder,
            decoder,
            gce,
            disc,
        })
    }

    pub fn encode(&self, y: &Tensor) -> Result<LatentDistribution> {
        self.encoder.forward(y)
    }

    /// Pyramid of the `(B, 3, H, W)` condition, or `None` without a GCE.
    pub fn condition(&self, x: &Tensor) -> Result<Option<FeaturePyramid>> {
        match &self.gce {
            Some((g, _)) => Ok(Some(g.forward(x)?)),
            None => Ok(None),
        }
    }

    pub fn decode(&self, z: &Tensor, pyramid: Option<&FeaturePyramid>) -> Result<Tensor> {
        match (pyramid, &self.gce) {
            (None, _) => self.decoder.forward(z, None),
            (Some(p), Some((_, f))) => self.decoder.forward(z, Some((f, p))),
            (Some(_), None) => Err(Error::invalid("pyramid given to a decoder without fusion layers")),
        }
    }

    /// Hash of the encoder, decoder and discriminator parameters.
    pub fn backbone_hash(&self) -> Result<String> {
        Ok(format!(
            "{}:{}:{}",
            self.store.hash("encoder.")?,
            self.store.hash("decoder.")?,
            self.store.hash("disc.")?
        ))
    }

    pub fn checkpoint(&self, kind: &str, step: usize) -> Result<Checkpoint> {
        Checkpoint::from_store(&self.store, &[""], kind, step, &self.config)
    }

    /// Rebuilds the model from a checkpoint, using its stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: VaeConfig = ck.config_as()?;
        let vae = Vae::new(&cfg, 0, DType::F32)?;
        ck.load_into(&vae.store)?;
        Ok(vae)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
