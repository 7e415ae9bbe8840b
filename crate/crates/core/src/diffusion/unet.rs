use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock, Scope, SelfAttention};

/// Three-level U-Net over the latent grid with a ControlNet-style side branch.
///
/// Level widths are `[c, 2c, 2c]` with one residual block per level on the
/// way down, a residual/attention/residual middle, and one residual block per
/// level on the way up. The control branch mirrors the down half and the
/// middle; its outputs enter the backbone skips and middle through
/// zero-initialised 1×1 convolutions.
pub struct UNet {
    base: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: SelfAttention,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    control: ControlBranch,
}

struct ControlBranch {
    hint: Vec<Conv2d>,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

/// Condition features at latent resolution; compute once per condition.
#[derive(Debug, Clone)]
pub struct Hint(pub Tensor);

fn widths(c: usize) -> [usize; 3] {
    [c, 2 * c, 2 * c]
}

impl UNet {
    pub fn new(s: &Scope, latent_channels: usize, base: usize) -> Result<Self> {
        if base == 0 || latent_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let w = widths(base);
        let tdim = 4 * base;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = base;
        for (i, &c) in w.iter().enumerate() {
            down.push(ResBlock::new(&s.sub(format!("down{i}")), cin, c, Some(tdim))?);
            if i < 2 {
                downsample.push(Conv2d::new(&s.sub(format!("downsample{i}")), c, c, 3, 2, 1)?);
            }
            cin = c;
        }
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut h = w[2];
        for i in (0..3).rev() {
            up.push(ResBlock::new(&s.sub(format!("up{i}")), h + w[i], w[i], Some(tdim))?);
            if i > 0 {
                upsample.push(Conv2d::same3(&s.sub(format!("upsample{i}")), w[i], w[i])?);
            }
            h = w[i];
        }
        Ok(UNet {
            base,
            time1: Linear::new(&s.sub("time1"), base, tdim)?,
            time2: Linear::new(&s.sub("time2"), tdim, tdim)?,
            conv_in: Conv2d::same3(&s.sub("conv_in"), latent_channels, base)?,
            down,
            downsample,
            mid1: ResBlock::new(&s.sub("mid1"), w[2], w[2], Some(tdim))?,
            mid_attn: SelfAttention::new(&s.sub("mid_attn"), w[2])?,
            mid2: ResBlock::new(&s.sub("mid2"), w[2], w[2], Some(tdim))?,
            up,
            upsample,
            norm_out: GroupNorm::new(&s.sub("norm_out"), base)?,
            conv_out: Conv2d::zeros(&s.sub("conv_out"), base, latent_channels, 3)?,
            control: ControlBranch::new(&s.sub("control"), latent_channels, base, tdim)?,
        })
    }

    /// Condition `(B, 3, H, W)` to latent-resolution hint features, `H/8 x W/8`.
    pub fn hint(&self, condition: &Tensor) -> Result<Hint> {
        let (_, c, h, w) = condition.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("condition must be (B, 3, 8k, 8m), got {:?}", condition.dims())));
        }
        let mut x = condition.affine(2.0, -1.0)?;
        let n = self.control.hint.len();
        for (i, conv) in self.control.hint.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < n {
                x = x.silu()?;
            }
        }
        Ok(Hint(x))
    }

    /// Predicted noise for `y_t` at timesteps `t` (one per batch entry).
    pub fn forward(&self, y_t: &Tensor, t: &[usize], hint: Option<&Hint>) -> Result<Tensor> {
        let (b, _, h, w) = y_t.dims4()?;
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for a batch of {b}", t.len())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!("latent {h}x{w} is not divisible by 4")));
        }
        let emb = timestep_embedding(t, self.base, y_t.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?;

        let control = match hint {
            Some(Hint(hf)) => {
                let (hb, _, hh, hw) = hf.dims4()?;
                if (hh, hw) != (h, w) || (hb != b && hb != 1) {
                    return Err(Error::invalid(format!(
                        "hint {:?} does not match latent {:?}",
                        hf.dims(),
                        y_t.dims()
                    )));
                }
                Some(self.control.forward(y_t, hf, &temb)?)
            }
            None => None,
        };

        let mut x = self.conv_in.forward(y_t)?;
        let mut skips = Vec::new();
        for i in 0..3 {
            x = self.down[i].forward(&x, Some(&temb))?;
            skips.push(x.clone());
            if i < 2 {
                x = self.downsample[i].forward(&x)?;
            }
        }
        x = self.mid1.forward(&x, Some(&temb))?;
        x = self.mid_attn.forward(&x)?;
        x = self.mid2.forward(&x, Some(&temb))?;
        if let Some((cs, cm)) = &control {
            x = (x + cm)?;
            for (s, c) in skips.iter_mut().zip(cs) {
                *s = (&*s + c)?;
            }
        }
        for (k, i) in (0..3).rev().enumerate() {
            x = Tensor::cat(&[&x, &skips[i]], 1)?;
            x = self.up[k].forward(&x, Some(&temb))?;
            if i > 0 {
                let (_, _, hh, ww) = x.dims4()?;
                x = self.upsample[k].forward(&x.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)
    }
}

impl ControlBranch {
    fn new(s: &Scope, latent_channels: usize, base: usize, tdim: usize) -> Result<Self> {
        let w = widths(base);
        // Three stride-2 convolutions take the condition to latent resolution.
        let hint_widths = [3, 16, 32, base];
        let mut hint = Vec::new();
        for i in 0..3 {
            let sc = s.sub(format!("hint{i}"));
            hint.push(if i == 2 {
                Conv2d::zeros(&sc, hint_widths[i], hint_widths[i + 1], 3).map(|c| c.with_stride(2))?
            } else {
                Conv2d::new(&sc, hint_widths[i], hint_widths[i + 1], 3, 2, 1)?
            });
        }
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut zero_skips = Vec::new();
        let mut cin = base;
        for (i, &c) in w.iter().enumerate() {
            down.push(ResBlock::new(&s.sub(format!("down{i}")), cin, c, Some(tdim))?);
            zero_skips.push(Conv2d::zeros(&s.sub(format!("zero{i}")), c, c, 1)?);
            if i < 2 {
                downsample.push(Conv2d::new(&s.sub(format!("downsample{i}")), c, c, 3, 2, 1)?);
            }
            cin = c;
        }
        Ok(ControlBranch {
            hint,
            conv_in: Conv2d::same3(&s.sub("conv_in"), latent_channels, base)?,
            down,
            downsample,
            mid: ResBlock::new(&s.sub("mid"), w[2], w[2], Some(tdim))?,
            zero_skips,
            zero_mid: Conv2d::zeros(&s.sub("zero_mid"), w[2], w[2], 1)?,
        })
    }

    fn forward(&self, y_t: &Tensor, hint: &Tensor, temb: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut x = self.conv_in.forward(y_t)?.broadcast_add(hint)?;
        let mut outs = Vec::new();
        for i in 0..3 {
            x = self.down[i].forward(&x, Some(temb))?;
            outs.push(self.zero_skips[i].forward(&x)?);
            if i < 2 {
                x = self.downsample[i].forward(&x)?;
            }
        }
        let m = self.zero_mid.forward(&self.mid.forward(&x, Some(temb))?)?;
        Ok((outs, m))
    }
}
