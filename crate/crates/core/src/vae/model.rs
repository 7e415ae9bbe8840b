use candle_core::Tensor;

use super::{FeaturePyramid, LatentDistribution, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamStore, ResBlock, Scope, SelfAttention};

fn check_divisible(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("image size {h}x{w} is not divisible by 8")));
    }
    Ok((b, c, h, w))
}

/// `[0, 1]` images to the `[-1, 1]` range the networks work in.
fn to_signed(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

struct DownBlock {
    res: [ResBlock; 2],
    down: Conv2d,
}

pub struct Encoder {
    stem: Conv2d,
    blocks: Vec<DownBlock>,
    norm: GroupNorm,
    out: Conv2d,
    latent_channels: usize,
}

impl Encoder {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        let ch = cfg.channels;
        let stem = Conv2d::same3(&s.sub("stem"), 1, ch[0])?;
        let mut blocks = Vec::new();
        let mut cin = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let b = s.sub(format!("down{i}"));
            blocks.push(DownBlock {
                res: [
                    ResBlock::new(&b.sub("res0"), cin, c, None)?,
                    ResBlock::new(&b.sub("res1"), c, c, None)?,
                ],
                down: Conv2d::new(&b.sub("downsample"), c, c, 3, 2, 1)?,
            });
            cin = c;
        }
        Ok(Encoder {
            stem,
            blocks,
            norm: GroupNorm::new(&s.sub("norm_out"), cin)?,
            out: Conv2d::same3(&s.sub("conv_out"), cin, 2 * cfg.latent_channels)?,
            latent_channels: cfg.latent_channels,
        })
    }

    /// `x` in `[0, 1]`, shape `(B, 1, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<LatentDistribution> {
        check_divisible(x)?;
        let mut h = self.stem.forward(&to_signed(x)?)?;
        for b in &self.blocks {
            h = b.res[0].forward(&h, None)?;
            h = b.res[1].forward(&h, None)?;
            h = b.down.forward(&h)?;
        }
        let h = self.out.forward(&self.norm.forward(&h)?.silu()?)?;
        let cz = self.latent_channels;
        Ok(LatentDistribution {
            mean: h.narrow(1, 0, cz)?,
            logvar: h.narrow(1, cz, cz)?.clamp(-30f64, 20f64)?,
        })
    }
}

struct UpBlock {
    res: [ResBlock; 2],
    attn: SelfAttention,
    up: Conv2d,
}

pub struct Decoder {
    conv_in: Conv2d,
    blocks: Vec<UpBlock>,
    norm: GroupNorm,
    out: Conv2d,
    /// Input channel count of each Up block.
    up_in: [usize; 3],
}

impl Decoder {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        let ch = cfg.channels;
        let up_in = [ch[2], ch[2], ch[1]];
        let up_out = [ch[2], ch[1], ch[0]];
        let conv_in = Conv2d::same3(&s.sub("conv_in"), cfg.latent_channels, ch[2])?;
        let mut blocks = Vec::new();
        for i in 0..3 {
            let b = s.sub(format!("up{i}"));
            blocks.push(UpBlock {
                res: [
                    ResBlock::new(&b.sub("res0"), up_in[i], up_out[i], None)?,
                    ResBlock::new(&b.sub("res1"), up_out[i], up_out[i], None)?,
                ],
                attn: SelfAttention::new(&b.sub("attn"), up_out[i])?,
                up: Conv2d::same3(&b.sub("upsample"), up_out[i], up_out[i])?,
            });
        }
        Ok(Decoder {
            conv_in,
            blocks,
            norm: GroupNorm::new(&s.sub("norm_out"), ch[0])?,
            out: Conv2d::same3(&s.sub("conv_out"), ch[0], 1)?,
            up_in,
        })
    }

    /// Decodes to the `[0, 1]` image scale (not clamped). `fusion` carries the
    /// gated pyramid and its projections.
    pub fn forward(&self, z: &Tensor, fusion: Option<(&Fusion, &FeaturePyramid)>) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some((f, p)) = fusion {
                // Up block i runs at the resolution of pyramid level 2 - i.
                let feat = p.levels.get(2 - i).ok_or_else(|| Error::invalid("pyramid needs three levels"))?;
                let (_, _, fh, fw) = feat.dims4()?;
                let (_, _, hh, hw) = h.dims4()?;
                if (fh, fw) != (hh, hw) {
                    return Err(Error::invalid(format!(
                        "pyramid level {} is {fh}x{fw}, Up block {i} runs at {hh}x{hw}",
                        2 - i
                    )));
                }
                h = (h + f.proj[i].forward(feat)?)?;
            }
            h = b.res[0].forward(&h, None)?;
            h = b.res[1].forward(&h, None)?;
            h = b.attn.forward(&h)?;
            let (_, _, hh, hw) = h.dims4()?;
            h = b.up.forward(&h.upsample_nearest2d(2 * hh, 2 * hw)?)?;
        }
        let x = self.out.forward(&self.norm.forward(&h)?.silu()?)?;
        Ok(x.affine(0.5, 0.5)?)
    }

    pub fn up_in(&self) -> [usize; 3] {
        self.up_in
    }
}

/// Zero-initialised 1×1 projections adding gated features to the Up-block inputs.
pub struct Fusion {
    proj: Vec<Conv2d>,
}

impl Fusion {
    pub fn new(s: &Scope, cfg: &VaeConfig, up_in: [usize; 3]) -> Result<Self> {
        let g = cfg.gce_channels;
        // Up block i consumes pyramid level 2 - i.
        let proj = (0..3)
            .map(|i| Conv2d::zeros(&s.sub(format!("proj{i}")), g[2 - i], up_in[i], 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fusion { proj })
    }
}

struct GatedDown {
    down: Conv2d,
    gate: Conv2d,
}

/// Gated convolutional encoder over the condition image.
pub struct Gce {
    blocks: Vec<GatedDown>,
    use_gate: bool,
    double_activation: bool,
}

impl Gce {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.gce_channels.iter().enumerate() {
            let b = s.sub(format!("block{i}"));
            blocks.push(GatedDown {
                down: Conv2d::new(&b.sub("down"), cin, c, 3, 2, 1)?,
                gate: Conv2d::same3(&b.sub("gate"), c, c)?,
            });
            cin = c;
        }
        Ok(Gce {
            blocks,
            use_gate: cfg.use_gate_module,
            double_activation: cfg.double_activation,
        })
    }

    /// Per block: `d = StridedConv(y)`, `y' = sigmoid(Conv(d)) * d`.
    /// Also returns the pre-gate activations `d`.
    pub fn forward_with_pregate(&self, x: &Tensor) -> Result<(FeaturePyramid, Vec<Tensor>)> {
        check_divisible(x)?;
        let mut y = to_signed(x)?;
        let mut levels = Vec::new();
        let mut pre = Vec::new();
        for b in &self.blocks {
            let d = b.down.forward(&y)?;
            y = if self.use_gate {
                let g = candle_nn::ops::sigmoid(&b.gate.forward(&d)?)?;
                let gated = (g * &d)?;
                if self.double_activation {
                    candle_nn::ops::sigmoid(&gated)?
                } else {
                    gated
                }
            } else {
                d.clone()
            };
            pre.push(d);
            levels.push(y.clone());
        }
        Ok((FeaturePyramid { levels }, pre))
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.forward_with_pregate(x)?.0)
    }
}

/// Patch discriminator: stride-2 conv blocks then a 1×1 logit map.
pub struct Discriminator {
    blocks: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        let mut cin = 1;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.disc_channels.iter().enumerate() {
            blocks.push(Conv2d::new(&s.sub(format!("block{i}")), cin, c, 3, 2, 1)?);
            cin = c;
        }
        Ok(Discriminator {
            blocks,
            out: Conv2d::new(&s.sub("out"), cin, 1, 1, 1, 0)?,
        })
    }

    /// Patch logits for `[0, 1]` images.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = to_signed(x)?;
        for b in &self.blocks {
            h = candle_nn::ops::leaky_relu(&b.forward(&h)?, 0.2)?;
        }
        self.out.forward(&h)
    }
}

/// Feature-space comparison network for the perceptual term.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    fn id(&self) -> String;
}

pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

/// Fixed, randomly initialised 4-layer conv stack. Its parameters never train.
pub struct RandomConvFeatures {
    _store: ParamStore,
    layers: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(dtype: candle_core::DType) -> Result<Self> {
        let store = ParamStore::new(PERCEPTUAL_SEED, dtype);
        store.freeze("");
        let s = store.root().sub("perceptual");
        let spec = [(1, 8, 1), (8, 16, 2), (16, 16, 2), (16, 32, 2)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| Conv2d::new(&s.sub(format!("conv{i}")), cin, cout, 3, stride, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(RandomConvFeatures { _store: store, layers })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = to_signed(x)?;
        let mut out = Vec::new();
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("random-conv4-seed{PERCEPTUAL_SEED:x}")
    }
}
