//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{augment_samples, load_split};
use crate::diffusion::{self, generate, noise_report, train_diffusion, DiffusionModel, DiffusionSet, Stage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, frequency_split};
use crate::nn::Checkpoint;
use crate::preprocess::preprocess_dataset;
use crate::raster::{self, Gray};
use crate::rng;
use crate::synthdata::{build_dataset, synth_sample, Split};
use crate::vae::{train_gce, train_vae_backbone, TrainingImages, Vae};

#[derive(Debug, Parser)]
#[command(name = "angiogen", version, about = "Late-phase angiogram synthesis from scanning-laser images")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Synth {
        /// Training pairs; defaults to the configured count.
        #[arg(long)]
        train: Option<usize>,
        /// Test pairs; defaults to the configured count.
        #[arg(long)]
        test: Option<usize>,
    },
    /// Sharpen conditions and register late frames to early frames.
    Preprocess {
        /// Dataset root; defaults to the configured data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Copy conditions unchanged.
        #[arg(long)]
        no_sharpen: bool,
        /// Copy late frames unchanged.
        #[arg(long)]
        no_register: bool,
    },
    /// Train one phase. Phases must run in order: vae, gce, diffusion-early, diffusion-late.
    Train {
        phase: Phase,
        /// Preprocessed dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured step count of this phase.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a late-phase image for every test condition.
    Sample {
        /// Preprocessed dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the checkpoints.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Sampler steps (respaced); defaults to the configured value.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare generated images with the test references.
    Evaluate {
        /// Directory of generated `<id>.png` images.
        #[arg(long)]
        generated: PathBuf,
        /// Dataset root holding the test references.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte-Carlo comparison of plain and low-frequency-enhanced noise.
    NoiseReport {
        /// Report plain noise only.
        #[arg(long)]
        no_lfen: bool,
        /// Monte-Carlo draws.
        #[arg(long)]
        draws: Option<usize>,
        /// Side length of the noise field.
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    Vae,
    Gce,
    DiffusionEarly,
    DiffusionLate,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Vae => "vae",
            Phase::Gce => "gce",
            Phase::DiffusionEarly => "diffusion-early",
            Phase::DiffusionLate => "diffusion-late",
        }
    }

    pub fn checkpoint(self, run_dir: &Path) -> PathBuf {
        run_dir.join(format!("{}.safetensors", self.name()))
    }

    pub fn loss_log(self, run_dir: &Path) -> PathBuf {
        run_dir.join(format!("{}_loss.csv", self.name()))
    }
}

pub const RUN_MANIFEST: &str = "manifest.jsonl";

/// One line of `manifest.jsonl`, appended when a training phase completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub config_hash: String,
    pub stage: String,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub steps: usize,
    pub first_loss: f64,
    /// Mean over the last ten steps.
    pub final_loss: f64,
}

pub fn read_manifest(run_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = run_dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e)))
        .collect()
}

fn append_manifest(run_dir: &Path, rec: &ManifestRecord) -> Result<()> {
    let path = run_dir.join(RUN_MANIFEST);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code: 0 success, 2 input error, 3 missing prerequisite,
/// 4 numerical failure, 1 anything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().resolved(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { train, test } => {
            if let Some(n) = train {
                cfg.data.train = *n;
            }
            if let Some(n) = test {
                cfg.data.test = *n;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let m = build_dataset(cfg.data.train, cfg.data.test, cfg.seed, &out, &cfg.synth_options())?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                m.entries.len(),
                cfg.data.train,
                cfg.data.test,
                crate::synthdata::Manifest::path(&out).display()
            );
            Ok(())
        }
        Command::Preprocess { data, no_sharpen, no_register } => {
            let root = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let mut opts = cfg.preprocess.clone();
            opts.sharpen &= !no_sharpen;
            opts.register &= !no_register;
            let s = preprocess_dataset(&root, &opts)?;
            println!(
                "preprocessed {} samples: {} registered, {} failed{}",
                s.n_samples,
                s.n_registered,
                s.n_failed,
                s.accurate_fraction
                    .map(|f| format!(", {:.1}% within 2 px of ground truth", 100.0 * f))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Train { phase, data, steps } => {
            if let Some(n) = steps {
                cfg.vae.steps = *n;
                cfg.diffusion.steps = *n;
            }
            let data = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let run_dir = cli.out.clone().unwrap_or_else(|| cfg.run_dir.clone());
            train_phase(&cfg, *phase, &data, &run_dir)
        }
        Command::Sample { data, run, steps } => {
            if let Some(n) = steps {
                cfg.diffusion.sample_steps = *n;
            }
            let data = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let run_dir = run.clone().unwrap_or_else(|| cfg.run_dir.clone());
            let out = cli.out.clone().unwrap_or_else(|| run_dir.join("samples"));
            let n = sample(&cfg, &data, &run_dir, &out)?;
            println!("wrote {n} images to {}", out.display());
            Ok(())
        }
        Command::Evaluate { generated, data } => {
            let data = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let mut report = evaluate(&data, generated, &cfg.evaluate)?;
            report.config_hash = Some(cfg.hash());
            report.config = Some(cfg.to_json());
            let out = cli.out.clone().unwrap_or_else(|| generated.clone());
            create_dir(&out)?;
            let path = out.join("metrics.json");
            fs::write(&path, report.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!("{:>10} {:>10} {:>10} {:>10}", "FID", "IS", "PSNR", "MS-SSIM");
            println!(
                "{:>10} {:>10} {:>10} {:>10.4}",
                opt(report.fid),
                opt(report.is_score),
                if report.psnr_db.is_finite() { format!("{:.4}", report.psnr_db) } else { "inf".into() },
                report.ms_ssim
            );
            Ok(())
        }
        Command::NoiseReport { no_lfen, draws, size } => {
            let size = size.unwrap_or(cfg.noise_report.size);
            let draws = draws.unwrap_or(cfg.noise_report.draws);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("noise_report"));
            write_noise_report(&cfg, !no_lfen, size, draws, &out)
        }
    }
}

fn require(path: &Path, phase: Phase) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "phase `{}` checkpoint {} not found; run `angiogen train {}` first",
            phase.name(),
            path.display(),
            phase.name()
        )))
    }
}

/// Prerequisite phases of `phase`, in training order.
pub fn prerequisites(phase: Phase, use_gce: bool) -> Vec<Phase> {
    let mut p = Vec::new();
    if phase != Phase::Vae {
        p.push(Phase::Vae);
    }
    if use_gce && matches!(phase, Phase::DiffusionEarly | Phase::DiffusionLate) {
        p.push(Phase::Gce);
    }
    if phase == Phase::DiffusionLate {
        p.push(Phase::DiffusionEarly);
    }
    p
}

/// The autoencoder used for decoding: with the gated encoder when enabled.
fn decoding_vae(cfg: &RunConfig, run_dir: &Path) -> Result<Vae> {
    let phase = if cfg.ablation.use_gce { Phase::Gce } else { Phase::Vae };
    Vae::load(&phase.checkpoint(run_dir))
}

fn stamp(ck: &mut Checkpoint, cfg: &RunConfig) {
    ck.extra.insert("run_config".into(), cfg.to_json());
    ck.extra.insert("config_hash".into(), serde_json::json!(cfg.hash()));
}

/// The train split after preprocessing, plus its augmented copies.
fn training_split(cfg: &RunConfig, data: &Path) -> Result<Vec<crate::data::PreparedSample>> {
    let train = load_split(data, Split::Train, cfg.load_options())?;
    augment_samples(train, cfg.data.augment_copies, rng::derive(cfg.seed, "augment"))
}

pub fn train_phase(cfg: &RunConfig, phase: Phase, data: &Path, run_dir: &Path) -> Result<()> {
    for p in prerequisites(phase, cfg.ablation.use_gce) {
        require(&p.checkpoint(run_dir), p)?;
    }
    if phase == Phase::Gce && !cfg.ablation.use_gce {
        return Err(Error::invalid("use_gce is false; there is no gce phase to train"));
    }
    create_dir(run_dir)?;
    let start = Instant::now();
    let seed = rng::derive(cfg.seed, &format!("train:{}", phase.name()));
    let opts = cfg.load_options();
    let ck_path = phase.checkpoint(run_dir);
    let log_path = phase.loss_log(run_dir);
    let (steps, first, last) = match phase {
        Phase::Vae | Phase::Gce => {
            let train = training_split(cfg, data)?;
            let test = load_split(data, Split::Test, opts)?;
            let imgs = TrainingImages::new(&train, &test, cfg.vae.phases, cfg.vae.probe_size);
            let (vae, log) = if phase == Phase::Vae {
                train_vae_backbone(&imgs, &cfg.vae, seed)?
            } else {
                let backbone = Checkpoint::load(&Phase::Vae.checkpoint(run_dir))?;
                train_gce(&imgs, &backbone, &cfg.vae, seed)?
            };
            let mut ck = vae.checkpoint(phase.name(), cfg.vae.steps)?;
            stamp(&mut ck, cfg);
            ck.extra.insert("probe_before".into(), serde_json::json!(log.probe_before));
            ck.extra.insert("probe_after".into(), serde_json::json!(log.probe_after));
            if let Some(u) = log.probe_unconditioned {
                ck.extra.insert("probe_unconditioned".into(), serde_json::json!(u));
            }
            ck.save(&ck_path)?;
            log.write_csv(&log_path)?;
            println!(
                "{}: probe reconstruction {:.5} -> {:.5}{}",
                phase.name(),
                log.probe_before,
                log.probe_after,
                log.probe_unconditioned.map(|u| format!(" (unconditioned {u:.5})")).unwrap_or_default()
            );
            (log.rows.len(), log.first_loss(), log.final_loss())
        }
        Phase::DiffusionEarly | Phase::DiffusionLate => {
            let stage = if phase == Phase::DiffusionEarly { Stage::Early } else { Stage::Late };
            let train = training_split(cfg, data)?;
            let encoder = Vae::load(&Phase::Vae.checkpoint(run_dir))?;
            let set = DiffusionSet::build(&encoder, &train, stage, cfg.diffusion.use_ctrd)?;
            let latent_channels = encoder.config.latent_channels;
            let mut model = DiffusionModel::new(&cfg.diffusion, latent_channels, seed)?;
            if stage == Stage::Late {
                let early = DiffusionModel::load(&Phase::DiffusionEarly.checkpoint(run_dir))?;
                if early.latent_channels != latent_channels || early.config.base_channels != cfg.diffusion.base_channels {
                    return Err(Error::invalid("diffusion-early checkpoint does not match the configured architecture"));
                }
                model.copy_weights_from(&early)?;
            }
            let log = train_diffusion(&mut model, &set, stage, seed)?;
            let mut ck = model.checkpoint(stage, cfg.diffusion.steps)?;
            stamp(&mut ck, cfg);
            ck.save(&ck_path)?;
            log.write_csv(&log_path)?;
            (log.rows.len(), log.first_loss(), log.final_loss())
        }
    };
    let rec = ManifestRecord {
        config_hash: cfg.hash(),
        stage: phase.name().to_string(),
        checkpoint: ck_path.clone(),
        loss_log: log_path,
        wall_clock_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        steps,
        first_loss: first.unwrap_or(f64::NAN),
        final_loss: last.unwrap_or(f64::NAN),
    };
    append_manifest(run_dir, &rec)?;
    println!(
        "{}: {} steps, loss {:.5} -> {:.5} in {:.1}s; wrote {}",
        phase.name(),
        steps,
        rec.first_loss,
        rec.final_loss,
        rec.wall_clock_s,
        ck_path.display()
    );
    Ok(())
}

/// Loads the decoding autoencoder and the late-stage model from `run_dir`,
/// with the sampler settings of `cfg`.
pub fn load_sampler(cfg: &RunConfig, run_dir: &Path) -> Result<(Vae, DiffusionModel)> {
    for p in prerequisites(Phase::DiffusionLate, cfg.ablation.use_gce).into_iter().chain([Phase::DiffusionLate]) {
        require(&p.checkpoint(run_dir), p)?;
    }
    let vae = decoding_vae(cfg, run_dir)?;
    let mut model = DiffusionModel::load(&Phase::DiffusionLate.checkpoint(run_dir))?;
    model.config.sample_steps = cfg.diffusion.sample_steps;
    model.config.sample_lfen = cfg.diffusion.sample_lfen;
    model.config.validate()?;
    Ok((vae, model))
}

fn sample(cfg: &RunConfig, data: &Path, run_dir: &Path, out: &Path) -> Result<usize> {
    let (vae, model) = load_sampler(cfg, run_dir)?;
    let test = load_split(data, Split::Test, cfg.load_options())?;
    create_dir(out)?;
    let seed = rng::derive(cfg.seed, "sample");
    for (i, s) in test.iter().enumerate() {
        // Keyed by test index so any subset reproduces the same images.
        let img = generate(&vae, &model, &[&s.condition], rng::derive(seed, &format!("test:{i}")))?;
        raster::save_gray_png(&out.join(format!("{}.png", s.id)), &img[0])?;
    }
    Ok(test.len())
}

#[derive(Debug, Serialize)]
struct BandSplit {
    cutoff_fraction: f64,
    alpha_bar: f64,
    /// Fraction of the added noise's energy in the low band.
    plain_low_fraction: f64,
    lfen_low_fraction: Option<f64>,
    images: Vec<String>,
}

#[derive(Debug, Serialize)]
struct NoiseReportFile {
    #[serde(flatten)]
    report: diffusion::NoiseReport,
    band_split: BandSplit,
    config_hash: String,
}

fn normalised(img: &ndarray::Array2<f64>) -> Gray {
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    img.mapv(|v| ((v - lo) / span) as f32)
}

fn write_noise_report(cfg: &RunConfig, enhanced: bool, size: usize, draws: usize, out: &Path) -> Result<()> {
    if size < 2 || draws < 2 {
        return Err(Error::invalid("noise report needs size >= 2 and draws >= 2"));
    }
    let beta_std = cfg.diffusion.lfen_beta_std;
    let report = noise_report(size, size, draws, cfg.seed, beta_std, enhanced)?;
    create_dir(out)?;

    // Band split of one noised synthetic image, as in the frequency figure.
    const CUTOFF: f64 = 0.25;
    const ALPHA_BAR: f64 = 0.5;
    let (t, _) = synth_sample(rng::derive(cfg.seed, "noise-report:image"), &cfg.synth_options())?;
    let img = t.late.mapv(|v| v as f64);
    let (h, w) = img.dim();
    let mut r = rng::stream(cfg.seed, "noise-report:example");
    let mut images = Vec::new();
    let mut fractions = Vec::new();
    for (name, lfen) in [("plain", false), ("lfen", true)] {
        if lfen && !enhanced {
            continue;
        }
        let d = diffusion::lfen_draw(&mut r, &[h, w], beta_std, lfen, candle_core::DType::F64)?;
        let noise = ndarray::Array2::from_shape_vec((h, w), d.total()?.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let (nl, nh) = frequency_split(noise.view(), CUTOFF)?;
        let e = |x: &ndarray::Array2<f64>| x.iter().map(|v| v * v).sum::<f64>();
        fractions.push(e(&nl) / (e(&nl) + e(&nh)));
        let noised = img.mapv(|v| ALPHA_BAR.sqrt() * v) + noise.mapv(|v| (1.0 - ALPHA_BAR).sqrt() * v);
        let (lo, hi) = frequency_split(noised.view(), CUTOFF)?;
        for (band, x) in [("noised", &noised), ("low", &lo), ("high", &hi)] {
            let file = format!("{name}_{band}.png");
            raster::save_gray_png(&out.join(&file), &normalised(x))?;
            images.push(file);
        }
    }
    let file = NoiseReportFile {
        band_split: BandSplit {
            cutoff_fraction: CUTOFF,
            alpha_bar: ALPHA_BAR,
            plain_low_fraction: fractions[0],
            lfen_low_fraction: fractions.get(1).copied(),
            images,
        },
        report,
        config_hash: cfg.hash(),
    };
    let path = out.join("noise_report.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let r = &file.report;
    println!("{:>24} {:>10} {:>10}", "", "plain", if enhanced { "lfen" } else { "-" });
    let row = |name: &str, f: fn(&diffusion::NoiseStats) -> f64| {
        println!(
            "{:>24} {:>10.4} {:>10}",
            name,
            f(&r.plain),
            r.lfen.as_ref().map(|l| format!("{:.4}", f(l))).unwrap_or_else(|| "-".into())
        )
    };
    row("per-pixel variance", |s| s.per_pixel_variance);
    row("spatial-mean variance", |s| s.spatial_mean_variance);
    row("inter-pixel covariance", |s| s.inter_pixel_covariance);
    row("DC power", |s| s.dc_power);
    if let Some(ratio) = r.dc_power_ratio {
        println!("DC power ratio (lfen/plain): {ratio:.2}");
    }
    println!("wrote {}", path.display());
    Ok(())
}
