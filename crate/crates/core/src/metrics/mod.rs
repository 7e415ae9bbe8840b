//! Image-quality metrics: PSNR, MS-SSIM, Fréchet distance and Inception
//! score over pluggable feature networks, a Fourier band split, and the
//! directory-level evaluation that writes a JSON report.

mod embed;
mod report;

pub use embed::{Classifier, Embedder, RandomConvClassifier, RandomConvEmbedder};
pub use report::{collect_images, evaluate, EvalConfig, ImageSet, MetricReport};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

fn check_same(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`,
/// which reports serialise as the string `"inf"`.
pub fn psnr(a: ArrayView2<f32>, b: ArrayView2<f32>, max_val: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Largest scale count whose coarsest level still fits the 11-tap window.
pub fn max_ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| g[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| g[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, g: &[f64], max_val: f64) -> (f64, f64) {
    let c1 = (K1 * max_val).powi(2);
    let c2 = (K2 * max_val).powi(2);
    let mu_a = filter(a, g);
    let mu_b = filter(b, g);
    let e_aa = filter(&(a * a), g);
    let e_bb = filter(&(b * b), g);
    let e_ab = filter(&(a * b), g);
    let n = mu_a.len() as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = e_aa.as_slice().unwrap()[i] - ma * ma;
        let vb = e_bb.as_slice().unwrap()[i] - mb * mb;
        let cov = e_ab.as_slice().unwrap()[i] - ma * mb;
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_sum / n, cs_sum / n)
}

fn avg_pool2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (x.nrows() / 2, x.ncols() / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        (x[[2 * i, 2 * j]] + x[[2 * i + 1, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j + 1]]) / 4.0
    })
}

/// Multi-scale SSIM over `scales` dyadic levels (dynamic range 1).
///
/// Fewer than five scales use the leading canonical exponents renormalised
/// to sum to one. Negative per-scale terms are clamped to zero before the
/// fractional powers, so the result lies in `[0, 1]`.
pub fn ms_ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, scales: usize) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dim();
    let max = max_ms_ssim_scales(h, w);
    if scales == 0 || scales > max {
        return Err(Error::invalid(format!(
            "ms_ssim with {scales} scales needs larger images; {h}x{w} supports at most {max}"
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let g = gaussian_window();
    let mut x = a.mapv(|v| v as f64);
    let mut y = b.mapv(|v| v as f64);
    let mut value = 1.0;
    for (k, &wk) in weights.iter().enumerate() {
        let (l, cs) = ssim_terms(&x, &y, &g, 1.0);
        let term = if k + 1 == scales { l * cs } else { cs };
        value *= term.max(0.0).powf(wk / total);
        if k + 1 < scales {
            x = avg_pool2(&x);
            y = avg_pool2(&y);
        }
    }
    Ok(value)
}

fn mean_cov(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    (mean, cov / (n.saturating_sub(1).max(1)) as f64)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Diagonal regularisation added to both covariances.
pub const FID_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussians fitted to two feature sets (rows are
/// samples). `Tr((S_r S_f)^(1/2))` is taken as the trace of the square root of
/// the symmetric `S_r^(1/2) S_f S_r^(1/2)`.
pub fn fid(real: &Array2<f64>, fake: &Array2<f64>) -> Result<f64> {
    if real.ncols() != fake.ncols() {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", real.ncols(), fake.ncols())));
    }
    if real.nrows() < 2 || fake.nrows() < 2 || real.ncols() == 0 {
        return Err(Error::invalid("fid needs at least two samples per set"));
    }
    let d = real.ncols();
    let (mr, sr) = mean_cov(real);
    let (mf, sf) = mean_cov(fake);
    let reg = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let (sr, sf) = (sr + &reg, sf + &reg);
    let root_r = sym_sqrt(&sr);
    let cross = sym_sqrt(&(&root_r * &sf * &root_r)).trace();
    let mean_term: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b).powi(2)).sum();
    let v = mean_term + sr.trace() + sf.trace() - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("fid evaluated to {v}")));
    }
    Ok(v.max(0.0))
}

/// `exp(mean_n KL(p_n || marginal))` over class-probability rows.
pub fn inception_score(probs: &Array2<f64>) -> Result<f64> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::invalid("inception score needs a non-empty probability matrix"));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!("row {i} is not a probability distribution (sum {s})")));
        }
    }
    let marginal = probs.mean_axis(ndarray::Axis(0)).expect("non-empty");
    // Neumaier summation keeps the mean of many equal terms exact to the ulp.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for row in probs.rows() {
        for (&p, &m) in row.iter().zip(marginal.iter()) {
            if p > 0.0 {
                let x = p * (p / m).ln();
                let t = sum + x;
                comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
                sum = t;
            }
        }
    }
    Ok(((sum + comp) / probs.nrows() as f64).exp())
}

fn fft2(data: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let (fw, fh) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for mut row in data.rows_mut() {
        let mut buf: Vec<_> = row.to_vec();
        fw.process(&mut buf);
        row.assign(&ndarray::ArrayView1::from(&buf));
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<_> = col.to_vec();
        fh.process(&mut buf);
        col.assign(&ndarray::ArrayView1::from(&buf));
    }
    if inverse {
        let n = (h * w) as f64;
        data.mapv_inplace(|c| c / n);
    }
}

/// Splits `img` into low and high spatial-frequency parts. A frequency is
/// "low" when its radius, normalised so the Nyquist frequency along each
/// axis is 1, is at most `cutoff_fraction`.
pub fn frequency_split(img: ArrayView2<f64>, cutoff_fraction: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
        return Err(Error::invalid("cutoff_fraction must be in (0, 1)"));
    }
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty image"));
    }
    let mut spec = img.mapv(|v| Complex::new(v, 0.0));
    fft2(&mut spec, false);
    let norm = |k: usize, n: usize| {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        if n > 1 { f / (n as f64 / 2.0) } else { 0.0 }
    };
    let mut low = spec.clone();
    let mut high = spec;
    for ((i, j), v) in low.indexed_iter_mut() {
        let r = (norm(i, h).powi(2) + norm(j, w).powi(2)).sqrt();
        if r <= cutoff_fraction {
            high[[i, j]] = Complex::new(0.0, 0.0);
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    fft2(&mut low, true);
    fft2(&mut high, true);
    Ok((low.mapv(|c| c.re), high.mapv(|c| c.re)))
}
