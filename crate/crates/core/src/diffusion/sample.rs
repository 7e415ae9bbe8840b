use candle_core::{DType, Tensor};
use rand::SeedableRng;

use super::noise::batch_noise;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn;

/// Anything that predicts the noise in `y_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, y_t: &Tensor, t: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub steps: usize,
    pub seed: u64,
    /// LFEN for the initial latent and the per-step noise.
    pub lfen: bool,
    pub beta_std: f64,
}

/// DDPM ancestral sampling over an evenly respaced subset of timesteps.
///
/// Each step forms `x0 = (x - sqrt(1 - ab) * n) / sqrt(ab)` from the predicted
/// noise and moves to the Gaussian posterior mean for the previous kept
/// timestep; the final step adds no noise.
pub fn ddpm_sample(
    model: &dyn NoisePredictor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    opts: &SamplerOptions,
    dtype: DType,
) -> Result<Tensor> {
    let ts = schedule.respaced_timesteps(opts.steps)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = batch_noise(&mut rng, shape, opts.beta_std, opts.lfen, dtype)?;
    for k in (0..ts.len()).rev() {
        let ab = schedule.alpha_bar[ts[k]];
        let ab_prev = if k == 0 { 1.0 } else { schedule.alpha_bar[ts[k - 1]] };
        let beta = 1.0 - ab / ab_prev;
        let n = model.predict(&x, ts[k])?;
        if n.dims() != x.dims() {
            return Err(Error::invalid(format!("predictor returned {:?} for {:?}", n.dims(), x.dims())));
        }
        let x0 = ((&x - n.affine((1.0 - ab).sqrt(), 0.0)?)? / ab.sqrt())?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x = (x0.affine(c0, 0.0)? + x.affine(ct, 0.0)?)?;
        if k > 0 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            let z = batch_noise(&mut rng, shape, opts.beta_std, opts.lfen, dtype)?;
            x = (x + z.affine(var.sqrt(), 0.0)?)?;
        }
        let m = nn::scalar(&x.abs()?.max_all()?)?;
        if !m.is_finite() {
            return Err(Error::Numerical(format!("sampler diverged at timestep {}", ts[k])));
        }
    }
    Ok(x)
}
