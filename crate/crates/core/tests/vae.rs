use angiogen::data::PreparedSample;
use angiogen::nn;
use angiogen::synthdata::{synth_sample, SynthOptions};
use angiogen::vae::{
    sample_latent, train_gce, train_vae_backbone, vae_loss, BackbonePhases, FeaturePyramid, RandomConvFeatures,
    TrainingImages, Vae, VaeConfig, LOSS_CSV_HEADER,
};
use candle_core::{backprop::GradStore, DType, Device, Tensor};
use rand::{Rng, SeedableRng};

fn tiny() -> VaeConfig {
    VaeConfig {
        channels: [4, 8, 8],
        gce_channels: [4, 4, 8],
        disc_channels: [4, 4, 8, 8],
        batch_size: 2,
        steps: 3,
        probe_size: 2,
        ..VaeConfig::default()
    }
}

fn samples(n: usize, base: u64) -> Vec<PreparedSample> {
    (0..n as u64)
        .map(|i| {
            let (t, _) = synth_sample(base + i, &SynthOptions { size: (32, 32), ..SynthOptions::default() }).unwrap();
            PreparedSample {
                id: format!("{i}"),
                seed: t.seed,
                condition: t.slo,
                early: t.early,
                late: t.late,
                lesion_mask: t.lesion_mask,
            }
        })
        .collect()
}

fn images() -> TrainingImages {
    TrainingImages::new(&samples(4, 100), &samples(2, 900), BackbonePhases::Both, 2)
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn gate_bounds_and_half_passthrough() {
    let vae = Vae::new(&tiny(), 3, DType::F64).unwrap();
    let (gce, _) = vae.gce.as_ref().unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let x = nn::randn(&mut r, &[2, 3, 32, 32], DType::F64).unwrap().affine(0.5, 0.5).unwrap();
        let (p, pre) = gce.forward_with_pregate(&x).unwrap();
        for (y, d) in p.levels.iter().zip(&pre) {
            for (a, b) in values(y).iter().zip(values(d)) {
                assert!(a.abs() <= b.abs(), "{a} vs {b}");
            }
        }
    }
    for i in 0..3 {
        for part in ["weight", "bias"] {
            let name = format!("gce.block{i}.gate.{part}");
            let cur = vae.store.named_tensors(&name).remove(0).1;
            vae.store.set(&name, &cur.zeros_like().unwrap()).unwrap();
        }
    }
    let x = nn::randn(&mut r, &[1, 3, 32, 32], DType::F64).unwrap();
    let (p, pre) = gce.forward_with_pregate(&x).unwrap();
    for (y, d) in p.levels.iter().zip(&pre) {
        assert_eq!(values(y), values(&d.affine(0.5, 0.0).unwrap()));
    }
}

#[test]
fn zero_pyramid_with_zero_fusion_is_neutral() {
    let vae = Vae::new(&tiny(), 4, DType::F32).unwrap();
    let x = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
    let p = vae.condition(&x).unwrap().unwrap();
    let z = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
    let plain = values(&vae.decode(&z, None).unwrap());
    assert_eq!(values(&vae.decode(&z, Some(&p.zeros_like().unwrap())).unwrap()), plain);
    // Zero-initialised projections also neutralise a live pyramid.
    assert_eq!(values(&vae.decode(&z, Some(&p)).unwrap()), plain);
}

#[test]
fn mismatched_pyramid_is_rejected() {
    let vae = Vae::new(&tiny(), 4, DType::F32).unwrap();
    let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let p = vae.condition(&x).unwrap().unwrap();
    let z = Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(vae.decode(&z, Some(&p)), Err(angiogen::Error::InvalidArgument(_))));
    let no_gce = Vae::new(&VaeConfig { use_gce: false, ..tiny() }, 4, DType::F32).unwrap();
    assert!(no_gce.gce.is_none());
    let p32 = vae.condition(&Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap()).unwrap().unwrap();
    assert!(no_gce.decode(&z, Some(&p32)).is_err());
}

fn total_loss(vae: &Vae, fx: &RandomConvFeatures, y: &Tensor, x: &Tensor) -> Tensor {
    let d = vae.encode(y).unwrap();
    let z = sample_latent(&d, 11).unwrap();
    let p = vae.condition(x).unwrap();
    let y_hat = vae.decode(&z, p.as_ref()).unwrap();
    let fake = vae.disc.forward(&y_hat).unwrap();
    let w = vae.config.weights;
    vae_loss(y, &y_hat, &fake, Some(&d), fx, &w, false).unwrap().0
}

#[test]
fn gradient_matches_finite_differences() {
    let vae = Vae::new(&tiny(), 5, DType::F64).unwrap();
    let fx = RandomConvFeatures::new(DType::F64).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    // Make the fusion path live so every parameter group carries gradient.
    for (name, t) in vae.store.named_tensors("fuse.") {
        vae.store.set(&name, &nn::randn(&mut r, t.dims(), DType::F64).unwrap().affine(0.1, 0.0).unwrap()).unwrap();
    }
    let y = Tensor::rand(0f64, 1.0, (2, 1, 16, 16), &Device::Cpu).unwrap();
    let x = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
    let loss = total_loss(&vae, &fx, &y, &x);
    let grads: GradStore = loss.backward().unwrap();
    let params = vae.store.named_tensors("");
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 5 {
        let (name, t) = &params[r.gen_range(0..params.len())];
        let Some(g) = grads.get(t) else { continue };
        let n = t.elem_count();
        let k = r.gen_range(0..n);
        let analytic = values(g)[k];
        if analytic.abs() < 1e-7 {
            continue;
        }
        let base = values(t);
        let eps = 1e-5;
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            vae.store.set(name, &Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap()).unwrap();
            nn::scalar(&total_loss(&vae, &fx, &y, &x)).unwrap()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        vae.store.set(name, &Tensor::from_vec(base, t.dims(), &Device::Cpu).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(rel < 1e-3, "{name}[{k}]: analytic {analytic} numeric {numeric} rel {rel}");
        checked += 1;
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn trained_fusion_makes_output_depend_on_pyramid() {
    let imgs = images();
    let (backbone, _) = train_vae_backbone(&imgs, &VaeConfig { steps: 1, ..tiny() }, 1).unwrap();
    let ck = backbone.checkpoint("vae", 1).unwrap();
    let (vae, _) = train_gce(&imgs, &ck, &VaeConfig { steps: 1, ..tiny() }, 1).unwrap();
    let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
    let p = vae.condition(&x).unwrap().unwrap();
    let z = Tensor::randn(0f32, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
    let base = values(&vae.decode(&z, Some(&p)).unwrap());
    let mut levels = p.levels.clone();
    let mut v = values(&levels[1]);
    v[3] += 1e-2;
    levels[1] = Tensor::from_vec(v, levels[1].dims(), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
    let bumped = values(&vae.decode(&z, Some(&FeaturePyramid { levels })).unwrap());
    let change: f64 = base.iter().zip(&bumped).map(|(a, b)| (a - b).abs()).sum();
    assert!(change > 0.0);
}

#[test]
fn zero_steps_reproduce_initialisation() {
    let imgs = images();
    let cfg = VaeConfig { steps: 0, ..tiny() };
    let (vae, log) = train_vae_backbone(&imgs, &cfg, 9).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(log.probe_before, log.probe_after);
    let fresh = Vae::new(&cfg, 9, DType::F32).unwrap();
    assert_eq!(vae.store.hash("").unwrap(), fresh.store.hash("").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.safetensors");
    vae.checkpoint("vae", 0).unwrap().save(&path).unwrap();
    let back = Vae::load(&path).unwrap();
    let y = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
    let z = fresh.encode(&y).unwrap().mean;
    assert_eq!(values(&back.decode(&z, None).unwrap()), values(&fresh.decode(&z, None).unwrap()));
}

#[test]
fn training_is_bitwise_reproducible_and_logs_csv() {
    let imgs = images();
    let (a, la) = train_vae_backbone(&imgs, &tiny(), 21).unwrap();
    let (b, lb) = train_vae_backbone(&imgs, &tiny(), 21).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.store.hash("").unwrap(), b.store.hash("").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    la.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1].split(',').count(), 7);
}

#[test]
fn gce_phase_freezes_backbone_and_drops_kl() {
    let imgs = images();
    let (backbone, _) = train_vae_backbone(&imgs, &VaeConfig { steps: 2, ..tiny() }, 2).unwrap();
    let ck = backbone.checkpoint("vae", 2).unwrap();
    let (vae, log) = train_gce(&imgs, &ck, &tiny(), 2).unwrap();
    assert_eq!(vae.backbone_hash().unwrap(), backbone.backbone_hash().unwrap());
    assert!(log.rows.iter().all(|r| r.loss.kl == 0.0));
    assert_ne!(vae.store.hash("fuse.").unwrap(), backbone.store.hash("fuse.").unwrap());
    assert!(train_gce(&imgs, &ck, &VaeConfig { use_gce: false, ..tiny() }, 2).is_err());
}
