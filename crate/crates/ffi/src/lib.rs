//! C ABI over the angiogen pipeline.
//!
//! Every fallible function returns an [`AngiogenStatus`]; on failure the
//! message is available from [`angiogen_last_error_message`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function. Images cross the boundary as row-major `float` planes in
//! `[0, 1]`; colour images are channel-first `3 × H × W`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use angiogen::cli::{self, Phase};
use angiogen::config::RunConfig;
use angiogen::diffusion::{self, DiffusionModel};
use angiogen::metrics;
use angiogen::preprocess::preprocess_dataset;
use angiogen::synthdata::build_dataset;
use angiogen::vae::Vae;
use angiogen::Error;
use ndarray::{Array2, ArrayView2, ArrayView3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngiogenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    MissingPrerequisite = 5,
    Numerical = 6,
    Tensor = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngiogenPhase {
    Vae = 0,
    Gce = 1,
    DiffusionEarly = 2,
    DiffusionLate = 3,
}

impl From<AngiogenPhase> for Phase {
    fn from(p: AngiogenPhase) -> Self {
        match p {
            AngiogenPhase::Vae => Phase::Vae,
            AngiogenPhase::Gce => Phase::Gce,
            AngiogenPhase::DiffusionEarly => Phase::DiffusionEarly,
            AngiogenPhase::DiffusionLate => Phase::DiffusionLate,
        }
    }
}

/// Run configuration handle.
pub struct AngiogenConfig(RunConfig);

/// Loaded autoencoder and late-stage diffusion model.
pub struct AngiogenGenerator {
    vae: Vae,
    model: DiffusionModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AngiogenPreprocessSummary {
    pub n_samples: usize,
    pub n_registered: usize,
    pub n_failed: usize,
    /// NaN when not measured.
    pub mean_corner_error: f64,
    /// NaN when not measured.
    pub accurate_fraction: f64,
}

/// Monte-Carlo statistics of one noise kind.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AngiogenNoiseStats {
    pub draws: usize,
    pub per_pixel_variance: f64,
    pub spatial_mean_variance: f64,
    pub inter_pixel_covariance: f64,
    pub dc_power: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(AngiogenStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) => AngiogenStatus::InvalidArgument,
            Error::Io { .. } => AngiogenStatus::Io,
            Error::Format { .. } => AngiogenStatus::Format,
            Error::MissingPrerequisite(_) => AngiogenStatus::MissingPrerequisite,
            Error::Numerical(_) => AngiogenStatus::Numerical,
            Error::Tensor(_) => AngiogenStatus::Tensor,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AngiogenStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AngiogenStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AngiogenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AngiogenStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            AngiogenStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_or_default(cfg: *const AngiogenConfig) -> RunConfig {
    match cfg.as_ref() {
        Some(c) => c.0.clone(),
        None => RunConfig::default().resolved(),
    }
}

unsafe fn plane<'a>(p: *const f32, h: usize, w: usize, what: &str) -> Result<ArrayView2<'a, f32>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if h == 0 || w == 0 {
        return Err(invalid(format!("{what} has an empty shape")));
    }
    Ok(ArrayView2::from_shape_ptr((h, w), p))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn angiogen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn angiogen_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a configuration holding the built-in defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn angiogen_config_default(out: *mut *mut AngiogenConfig) -> AngiogenStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(AngiogenConfig(RunConfig::default().resolved())))))
}

/// Loads a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn angiogen_config_load(path: *const c_char, out: *mut *mut AngiogenConfig) -> AngiogenStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let cfg = RunConfig::load(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(AngiogenConfig(cfg))))
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn angiogen_config_set_seed(cfg: *mut AngiogenConfig, seed: u64) -> AngiogenStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("config"))?;
        c.0.seed = seed;
        Ok(())
    })
}

/// Writes the 16-digit hex configuration hash plus a NUL into `buf`, which
/// must hold at least 17 bytes.
///
/// # Safety
/// `cfg` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn angiogen_config_hash(cfg: *const AngiogenConfig, buf: *mut c_char, len: usize) -> AngiogenStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let h = c.0.hash();
        if len < h.len() + 1 {
            return Err(Fail(AngiogenStatus::BufferTooSmall, format!("hash needs {} bytes", h.len() + 1)));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn angiogen_config_free(cfg: *mut AngiogenConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes a synthetic dataset of the configured size to `out_dir`. A null
/// `cfg` uses the defaults.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn angiogen_synth_dataset(cfg: *const AngiogenConfig, out_dir: *const c_char) -> AngiogenStatus {
    guard(|| {
        let c = config_or_default(cfg);
        let out = path_arg(out_dir, "out_dir")?;
        build_dataset(c.data.train, c.data.test, c.seed, &out, &c.synth_options())?;
        Ok(())
    })
}

/// Sharpens conditions and registers late frames in place.
///
/// # Safety
/// `data_dir` must be a NUL-terminated string; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn angiogen_preprocess_dataset(
    cfg: *const AngiogenConfig,
    data_dir: *const c_char,
    summary: *mut AngiogenPreprocessSummary,
) -> AngiogenStatus {
    guard(|| {
        let c = config_or_default(cfg);
        let s = preprocess_dataset(&path_arg(data_dir, "data_dir")?, &c.preprocess)?;
        if !summary.is_null() {
            summary.write(AngiogenPreprocessSummary {
                n_samples: s.n_samples,
                n_registered: s.n_registered,
                n_failed: s.n_failed,
                mean_corner_error: s.mean_corner_error.unwrap_or(f64::NAN),
                accurate_fraction: s.accurate_fraction.unwrap_or(f64::NAN),
            });
        }
        Ok(())
    })
}

/// Trains one phase, writing its checkpoint into `run_dir` and appending to
/// the run manifest. Phases must be trained in order.
///
/// # Safety
/// `data_dir` and `run_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn angiogen_train(
    cfg: *const AngiogenConfig,
    phase: AngiogenPhase,
    data_dir: *const c_char,
    run_dir: *const c_char,
) -> AngiogenStatus {
    guard(|| {
        let c = config_or_default(cfg);
        let data = path_arg(data_dir, "data_dir")?;
        let run = path_arg(run_dir, "run_dir")?;
        cli::train_phase(&c, phase.into(), &data, &run)?;
        Ok(())
    })
}

/// Loads the trained models from `run_dir` for sampling.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn angiogen_generator_open(
    cfg: *const AngiogenConfig,
    run_dir: *const c_char,
    out: *mut *mut AngiogenGenerator,
) -> AngiogenStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let c = config_or_default(cfg);
        let (vae, model) = cli::load_sampler(&c, &path_arg(run_dir, "run_dir")?)?;
        write_out(out, Box::into_raw(Box::new(AngiogenGenerator { vae, model })))
    })
}

/// Generates one late-phase image from a `3 × h × w` condition into the
/// `h × w` buffer `out`. Deterministic in `seed`.
///
/// # Safety
/// `condition` must be readable for `3*h*w` floats and `out` writable for
/// `h*w` floats.
#[no_mangle]
pub unsafe extern "C" fn angiogen_generator_generate(
    gen: *const AngiogenGenerator,
    condition: *const f32,
    h: usize,
    w: usize,
    seed: u64,
    out: *mut f32,
) -> AngiogenStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("generator"))?;
        if condition.is_null() {
            return Err(null("condition"));
        }
        if out.is_null() {
            return Err(null("output buffer"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(invalid(format!("image size {h}x{w} must be a positive multiple of 32")));
        }
        let cond = ArrayView3::from_shape_ptr((3, h, w), condition).to_owned();
        let img = diffusion::generate(&g.vae, &g.model, &[&cond], seed)?;
        let src = img[0].as_standard_layout();
        ptr::copy_nonoverlapping(src.as_ptr(), out, h * w);
        Ok(())
    })
}

/// # Safety
/// `gen` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn angiogen_generator_free(gen: *mut AngiogenGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// PSNR in dB; identical images give positive infinity.
///
/// # Safety
/// `a` and `b` must be readable for `h*w` floats.
#[no_mangle]
pub unsafe extern "C" fn angiogen_psnr(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    max_val: f64,
    out: *mut f64,
) -> AngiogenStatus {
    guard(|| write_out(out, metrics::psnr(plane(a, h, w, "a")?, plane(b, h, w, "b")?, max_val)?))
}

/// MS-SSIM over `scales` scales (at most 5, limited by the image size).
///
/// # Safety
/// `a` and `b` must be readable for `h*w` floats.
#[no_mangle]
pub unsafe extern "C" fn angiogen_ms_ssim(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    scales: usize,
    out: *mut f64,
) -> AngiogenStatus {
    guard(|| write_out(out, metrics::ms_ssim(plane(a, h, w, "a")?, plane(b, h, w, "b")?, scales)?))
}

/// Fréchet distance between two feature sets stored row-major as
/// `n_real × dim` and `n_fake × dim`.
///
/// # Safety
/// `real` and `fake` must be readable for the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn angiogen_fid(
    real: *const f64,
    n_real: usize,
    fake: *const f64,
    n_fake: usize,
    dim: usize,
    out: *mut f64,
) -> AngiogenStatus {
    guard(|| {
        if real.is_null() || fake.is_null() {
            return Err(null("feature matrix"));
        }
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let r: Array2<f64> = ArrayView2::from_shape_ptr((n_real, dim), real).to_owned();
        let f: Array2<f64> = ArrayView2::from_shape_ptr((n_fake, dim), fake).to_owned();
        write_out(out, metrics::fid(&r, &f)?)
    })
}

/// Monte-Carlo noise statistics over `draws` samples of an `h × w` field,
/// plain Gaussian or low-frequency enhanced.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn angiogen_noise_stats(
    h: usize,
    w: usize,
    draws: usize,
    seed: u64,
    beta_std: f64,
    enhanced: bool,
    out: *mut AngiogenNoiseStats,
) -> AngiogenStatus {
    guard(|| {
        if h < 2 || w < 2 || draws < 2 {
            return Err(invalid("noise statistics need h, w, draws >= 2"));
        }
        let s = diffusion::noise_stats(h, w, draws, seed, beta_std, enhanced)?;
        write_out(
            out,
            AngiogenNoiseStats {
                draws: s.draws,
                per_pixel_variance: s.per_pixel_variance,
                spatial_mean_variance: s.spatial_mean_variance,
                inter_pixel_covariance: s.inter_pixel_covariance,
                dc_power: s.dc_power,
            },
        )
    })
}

/// Evaluates generated images against a dataset's test split and returns the
/// metric report as a JSON string, to be released with
/// [`angiogen_string_free`].
///
/// # Safety
/// Paths must be NUL-terminated strings; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn angiogen_evaluate(
    cfg: *const AngiogenConfig,
    data_dir: *const c_char,
    generated_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> AngiogenStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("output pointer"));
        }
        let c = config_or_default(cfg);
        let data = path_arg(data_dir, "data_dir")?;
        let gen = path_arg(generated_dir, "generated_dir")?;
        let mut report = metrics::evaluate(&data, &gen, &c.evaluate)?;
        report.config_hash = Some(c.hash());
        report.config = Some(c.to_json());
        let json = CString::new(report.to_json()?).map_err(|e| invalid(e.to_string()))?;
        write_out(out_json, json.into_raw())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn angiogen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
