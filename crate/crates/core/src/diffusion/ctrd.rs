use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Gray};

/// Normalised `|early - late|` at image and latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceHeatmap {
    pub full_res: Gray,
    pub latent_res: Gray,
}

/// Min-max normalised absolute difference, area-averaged down to `latent`.
/// A (near) constant difference gives an all-zero map.
pub fn ctrd_heatmap(early: &Gray, late: &Gray, latent: (usize, usize)) -> Result<DifferenceHeatmap> {
    if early.dim() != late.dim() {
        return Err(Error::invalid(format!(
            "early {:?} and late {:?} differ in size",
            early.dim(),
            late.dim()
        )));
    }
    if latent.0 == 0 || latent.1 == 0 {
        return Err(Error::invalid("latent size must be positive"));
    }
    let diff = (early - late).mapv(f32::abs);
    let lo = diff.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = diff.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let full_res = if (hi - lo) < 1e-8 {
        Array2::zeros(diff.dim())
    } else {
        diff.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    };
    let latent_res = raster::area_resize(full_res.view(), latent.0, latent.1).mapv(|v| (v as f32).clamp(0.0, 1.0));
    Ok(DifferenceHeatmap { full_res, latent_res })
}

/// How the CTRD weight `alpha` evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaMode {
    #[serde(rename = "ramp")]
    Ramp,
    #[serde(rename = "fixed_0.25")]
    Fixed025,
    #[serde(rename = "fixed_1.0")]
    Fixed1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrdWeightConfig {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub ramp_fraction: f64,
}

impl Default for CtrdWeightConfig {
    fn default() -> Self {
        CtrdWeightConfig {
            alpha_start: 0.25,
            alpha_end: 1.0,
            ramp_fraction: 0.5,
        }
    }
}

impl CtrdWeightConfig {
    pub fn for_mode(mode: AlphaMode, base: CtrdWeightConfig) -> Self {
        match mode {
            AlphaMode::Ramp => base,
            AlphaMode::Fixed025 => CtrdWeightConfig { alpha_start: 0.25, alpha_end: 0.25, ..base },
            AlphaMode::Fixed1 => CtrdWeightConfig { alpha_start: 1.0, alpha_end: 1.0, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end) {
            return Err(Error::invalid("need 0 <= alpha_start <= alpha_end"));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::invalid("ramp_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Linear ramp from `alpha_start` to `alpha_end` over the first
/// `ramp_fraction` of training, then flat.
pub fn alpha_at(epoch: usize, total_epochs: usize, cfg: &CtrdWeightConfig) -> f64 {
    if total_epochs == 0 {
        return cfg.alpha_end;
    }
    let frac = epoch as f64 / total_epochs as f64;
    let p = (frac / cfg.ramp_fraction).min(1.0);
    cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * p
}

/// `mean(alpha * w * r^2 + r^2)` with `r = target - pred`. `w` is
/// `(B, 1, h, w)` and broadcasts over channels.
pub fn ctrd_loss(pred: &Tensor, target: &Tensor, w: &Tensor, alpha: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", pred.dims(), target.dims())));
    }
    let r2 = (target - pred)?.sqr()?;
    let weighted = r2.broadcast_mul(&w.affine(alpha, 1.0)?)?;
    Ok(weighted.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn heatmap_edge_cases() {
        let a = Array2::from_elem((16, 16), 0.3f32);
        let h = ctrd_heatmap(&a, &a, (2, 2)).unwrap();
        assert!(h.full_res.iter().chain(h.latent_res.iter()).all(|&v| v == 0.0));
        let mut b = a.clone();
        b[[3, 5]] = 0.9;
        let h = ctrd_heatmap(&a, &b, (2, 2)).unwrap();
        assert_eq!(h.full_res[[3, 5]], 1.0);
        assert_eq!(h.full_res.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!((h.latent_res[[0, 0]] - 1.0 / 64.0).abs() < 1e-7);
        assert!(ctrd_heatmap(&a, &Array2::zeros((8, 16)), (2, 2)).is_err());
    }

    #[test]
    fn alpha_schedule() {
        let c = CtrdWeightConfig::default();
        assert_eq!(alpha_at(0, 200, &c), 0.25);
        assert_eq!(alpha_at(100, 200, &c), 1.0);
        assert_eq!(alpha_at(150, 200, &c), 1.0);
        assert_eq!(alpha_at(200, 200, &c), 1.0);
        assert!((alpha_at(50, 200, &c) - 0.625).abs() < 1e-12);
        let f = CtrdWeightConfig::for_mode(AlphaMode::Fixed025, c);
        assert_eq!((alpha_at(0, 10, &f), alpha_at(10, 10, &f)), (0.25, 0.25));
    }

    #[test]
    fn loss_collapses() {
        let dev = Device::Cpu;
        let p = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev).unwrap();
        let t = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev).unwrap();
        let mse = (&p - &t).unwrap().sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        let zero = Tensor::zeros((2, 1, 3, 3), DType::F64, &dev).unwrap();
        let one = Tensor::ones((2, 1, 3, 3), DType::F64, &dev).unwrap();
        let l0 = ctrd_loss(&p, &t, &zero, 0.7).unwrap().to_scalar::<f64>().unwrap();
        let l1 = ctrd_loss(&p, &t, &one, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l0, mse);
        assert_eq!(l1, 2.0 * mse);
        assert_eq!(ctrd_loss(&p, &p, &one, 1.0).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}
