use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;

/// `sqrt(0.5)`: the offset scale factor is drawn with variance 0.5.
pub const DEFAULT_BETA_STD: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One low-frequency-enhanced noise draw: white noise plus a spatially
/// constant offset `a * beta_scale`.
#[derive(Debug, Clone)]
pub struct LfenDraw {
    pub eps: Tensor,
    pub eps_l: Tensor,
    pub a: f64,
    pub beta_scale: f64,
}

impl LfenDraw {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.eps + &self.eps_l)?)
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws one LFEN sample of `shape` from `rng`. With `enhanced = false` the
/// offset is zero (plain Gaussian noise); the same white noise is drawn
/// either way.
pub fn lfen_draw<R: Rng>(rng: &mut R, shape: &[usize], beta_std: f64, enhanced: bool, dtype: DType) -> Result<LfenDraw> {
    let n: usize = shape.iter().product();
    let eps = normals(rng, n);
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample::<f64, _>(StandardNormal) * beta_std;
    let (a, b) = if enhanced { (a, b) } else { (0.0, 0.0) };
    Ok(LfenDraw {
        eps: Tensor::from_vec(eps, shape, &Device::Cpu)?.to_dtype(dtype)?,
        eps_l: Tensor::full(a * b, shape, &Device::Cpu)?.to_dtype(dtype)?,
        a,
        beta_scale: b,
    })
}

/// Seeded LFEN draw for a single `(C, h, w)` grid.
pub fn lfen_sample(shape: &[usize], seed: u64, beta_std: f64) -> Result<LfenDraw> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    lfen_draw(&mut r, shape, beta_std, true, DType::F64)
}

/// Total noise for a batch: one independent draw (and offset) per entry.
pub fn batch_noise<R: Rng>(rng: &mut R, shape: &[usize], beta_std: f64, enhanced: bool, dtype: DType) -> Result<Tensor> {
    let per: Vec<usize> = shape[1..].to_vec();
    let draws = (0..shape[0])
        .map(|_| lfen_draw(rng, &per, beta_std, enhanced, dtype)?.total())
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&draws, 0)?)
}

/// Monte-Carlo statistics of single-channel `h x w` noise fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub draws: usize,
    /// Mean over pixels of the per-pixel sample variance.
    pub per_pixel_variance: f64,
    /// Sample variance of the spatial mean.
    pub spatial_mean_variance: f64,
    /// Mean covariance over all pairs of distinct pixels.
    pub inter_pixel_covariance: f64,
    /// Mean power of the zero-frequency Fourier bin, `|sum x|^2`.
    pub dc_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub height: usize,
    pub width: usize,
    pub beta_std: f64,
    pub seed: u64,
    pub enhanced: bool,
    pub plain: NoiseStats,
    /// Absent when the offset is disabled.
    pub lfen: Option<NoiseStats>,
    /// `lfen.dc_power / plain.dc_power`.
    pub dc_power_ratio: Option<f64>,
    /// Closed-form targets for the enhanced noise.
    pub expected_per_pixel_variance: f64,
    pub expected_spatial_mean_variance: f64,
    pub expected_inter_pixel_covariance: f64,
}

pub fn noise_stats(h: usize, w: usize, draws: usize, seed: u64, beta_std: f64, enhanced: bool) -> Result<NoiseStats> {
    let n = h * w;
    let mut r = rng::stream(seed, if enhanced { "noise-report:lfen" } else { "noise-report:plain" });
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut means = Vec::with_capacity(draws);
    let mut dc = 0.0;
    for _ in 0..draws {
        let d = lfen_draw(&mut r, &[h, w], beta_std, enhanced, DType::F64)?;
        let v: Vec<f64> = d.total()?.flatten_all()?.to_vec1()?;
        for (i, x) in v.iter().enumerate() {
            sum[i] += x;
            sum_sq[i] += x * x;
        }
        let s: f64 = v.iter().sum();
        means.push(s / n as f64);
        dc += s * s;
    }
    let m = draws as f64;
    let per_pixel_variance = (0..n)
        .map(|i| (sum_sq[i] - sum[i] * sum[i] / m) / (m - 1.0))
        .sum::<f64>()
        / n as f64;
    let mm = means.iter().sum::<f64>() / m;
    let spatial_mean_variance = means.iter().map(|x| (x - mm).powi(2)).sum::<f64>() / (m - 1.0);
    // Var(sum) = sum of variances + sum over ordered distinct pairs of covariances.
    let var_sum = spatial_mean_variance * (n * n) as f64;
    let inter_pixel_covariance = (var_sum - per_pixel_variance * n as f64) / (n * (n - 1)) as f64;
    Ok(NoiseStats {
        draws,
        per_pixel_variance,
        spatial_mean_variance,
        inter_pixel_covariance,
        dc_power: dc / m,
    })
}

pub fn noise_report(h: usize, w: usize, draws: usize, seed: u64, beta_std: f64, enhanced: bool) -> Result<NoiseReport> {
    let plain = noise_stats(h, w, draws, seed, beta_std, false)?;
    let lfen = if enhanced {
        Some(noise_stats(h, w, draws, seed, beta_std, true)?)
    } else {
        None
    };
    let v = beta_std * beta_std;
    Ok(NoiseReport {
        height: h,
        width: w,
        beta_std,
        seed,
        enhanced,
        dc_power_ratio: lfen.as_ref().map(|l| l.dc_power / plain.dc_power),
        plain,
        lfen,
        expected_per_pixel_variance: 1.0 + v,
        expected_spatial_mean_variance: v + 1.0 / (h * w) as f64,
        expected_inter_pixel_covariance: v,
    })
}
