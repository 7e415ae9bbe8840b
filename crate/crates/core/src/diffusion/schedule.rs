use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta DDPM schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `steps` timesteps evenly spread over `[0, T)`, ascending, always
    /// including `T - 1`.
    pub fn respaced_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::invalid(format!("sampling steps must be in 1..={t}, got {steps}")));
        }
        if steps == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..steps)
            .map(|k| ((k as f64) * (t - 1) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar })
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

fn check_t(s: &NoiseSchedule, t: &[usize], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(Error::invalid(format!("{} timesteps for a batch of {batch}", t.len())));
    }
    if let Some(&bad) = t.iter().find(|&&v| v >= s.len()) {
        return Err(Error::invalid(format!("timestep {bad} out of range 0..{}", s.len())));
    }
    Ok(())
}

/// `y_t = sqrt(ab_t) * y0 + sqrt(1 - ab_t) * noise`, one timestep per batch entry.
pub fn forward_noise(y0: &Tensor, t: &[usize], noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if y0.dims() != noise.dims() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", y0.dims(), noise.dims())));
    }
    check_t(s, t, y0.dims()[0])?;
    let a: Vec<f64> = t.iter().map(|&i| s.alpha_bar[i].sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&i| (1.0 - s.alpha_bar[i]).sqrt()).collect();
    Ok((y0.broadcast_mul(&per_sample(&a, y0)?)? + noise.broadcast_mul(&per_sample(&b, y0)?)?)?)
}

/// Inverse of [`forward_noise`] given the injected noise.
pub fn recover_y0(y_t: &Tensor, t: &[usize], noise: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    check_t(s, t, y_t.dims()[0])?;
    let inv_a: Vec<f64> = t.iter().map(|&i| 1.0 / s.alpha_bar[i].sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&i| (1.0 - s.alpha_bar[i]).sqrt()).collect();
    let signal = (y_t - noise.broadcast_mul(&per_sample(&b, y_t)?)?)?;
    Ok(signal.broadcast_mul(&per_sample(&inv_a, y_t)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![0.5]);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bar.last().unwrap() < 0.01);
        assert_eq!(s.alpha_bar[0], 1.0 - s.beta[0]);
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn respacing() {
        let s = make_schedule(200, 1e-3, 0.02).unwrap();
        assert_eq!(s.respaced_timesteps(1).unwrap(), vec![199]);
        let ts = s.respaced_timesteps(50).unwrap();
        assert_eq!((ts[0], ts[49], ts.len()), (0, 199, 50));
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s.respaced_timesteps(200).unwrap(), (0..200).collect::<Vec<_>>());
        assert!(s.respaced_timesteps(201).is_err());
    }
}
