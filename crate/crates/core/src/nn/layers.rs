use candle_core::{DType, Device, Tensor};
use candle_nn::Module;

use super::{Init, Scope};
use crate::error::Result;

/// Largest of 8, 4, 2, 1 that divides `channels` and leaves at least two
/// channels per group.
pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Conv2d {
            w: s.get("weight", &[cout, cin, k, k], Init::Uniform(bound))?,
            b: s.get("bias", &[cout], Init::Uniform(bound))?,
            stride,
            padding,
        })
    }

    /// 3×3, stride 1, padding 1.
    pub fn same3(s: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Self::new(s, cin, cout, 3, 1, 1)
    }

    /// Zero-initialised weights and bias.
    pub fn zeros(s: &Scope, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Conv2d {
            w: s.get("weight", &[cout, cin, k, k], Init::Const(0.0))?,
            b: s.get("bias", &[cout], Init::Const(0.0))?,
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Conv2d { stride, ..self }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        let c = self.b.dims1()?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm(candle_nn::GroupNorm);

impl GroupNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let w = s.get("weight", &[channels], Init::Const(1.0))?;
        let b = s.get("bias", &[channels], Init::Const(0.0))?;
        Ok(GroupNorm(candle_nn::GroupNorm::new(w, b, channels, groups_for(channels), 1e-6)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear(candle_nn::Linear);

impl Linear {
    pub fn new(s: &Scope, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let w = s.get("weight", &[dout, din], Init::Uniform(bound))?;
        let b = s.get("bias", &[dout], Init::Uniform(bound))?;
        Ok(Linear(candle_nn::Linear::new(w, Some(b))))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Pre-activation residual block: norm, SiLU, conv, twice, with an optional
/// additive time embedding between the two convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
    temb: Option<Linear>,
}

impl ResBlock {
    pub fn new(s: &Scope, cin: usize, cout: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(ResBlock {
            n1: GroupNorm::new(&s.sub("norm1"), cin)?,
            c1: Conv2d::same3(&s.sub("conv1"), cin, cout)?,
            n2: GroupNorm::new(&s.sub("norm2"), cout)?,
            c2: Conv2d::same3(&s.sub("conv2"), cout, cout)?,
            skip: if cin != cout {
                Some(Conv2d::new(&s.sub("skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
            temb: match temb_dim {
                Some(d) => Some(Linear::new(&s.sub("temb"), d, cout)?),
                None => None,
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let e = proj.forward(&t.silu()?)?;
            let (b, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        }
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out: Conv2d,
}

impl SelfAttention {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(SelfAttention {
            norm: GroupNorm::new(&s.sub("norm"), c)?,
            q: Conv2d::new(&s.sub("q"), c, c, 1, 1, 0)?,
            k: Conv2d::new(&s.sub("k"), c, c, 1, 1, 0)?,
            v: Conv2d::new(&s.sub("v"), c, c, 1, 1, 0)?,
            out: Conv2d::new(&s.sub("out"), c, c, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = self.norm.forward(x)?;
        let flat = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, c, h * w))?) };
        // The 1/sqrt(c) scale goes on q, which is far smaller than the score matrix.
        let q = (flat(self.q.forward(&n)?)?.transpose(1, 2)?.contiguous()? / (c as f64).sqrt())?;
        let k = flat(self.k.forward(&n)?)?;
        let v = flat(self.v.forward(&n)?)?.transpose(1, 2)?.contiguous()?;
        let scores = q.matmul(&k)?;
        let attn = super::softmax_last_dim(&scores)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + self.out.forward(&o)?)?)
    }
}

/// Sinusoidal embedding of integer timesteps, shape `(len(t), dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half;
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = step as f64 * freq;
            v.push(if i < half { a.cos() } else { a.sin() });
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn softplus_matches_closed_form() {
        let x = Tensor::new(&[-50f64, -1.0, 0.0, 2.0, 60.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [-50f64, -1.0, 0.0, 2.0, 60.0].iter().zip(y) {
            let want = if *xi > 30.0 { *xi } else { (1.0 + xi.exp()).ln() };
            assert!((yi - want).abs() < 1e-12, "{xi}: {yi} vs {want}");
        }
    }

    #[test]
    fn conv_shapes_and_zero_init() {
        let s = ParamStore::new(0, DType::F32);
        let x = Tensor::ones((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let down = Conv2d::new(&s.root().sub("d"), 3, 5, 3, 2, 1).unwrap();
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, 5, 8, 8]);
        let z = Conv2d::zeros(&s.root().sub("z"), 3, 4, 1).unwrap();
        let out = z.forward(&x).unwrap();
        assert_eq!(out.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn attention_and_resblock_preserve_shape() {
        let s = ParamStore::new(0, DType::F32);
        let x = Tensor::ones((2, 8, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let a = SelfAttention::new(&s.root().sub("a"), 8).unwrap();
        assert_eq!(a.forward(&x).unwrap().dims(), &[2, 8, 4, 4]);
        let r = ResBlock::new(&s.root().sub("r"), 8, 16, Some(12)).unwrap();
        let t = timestep_embedding(&[0, 5], 12, DType::F32).unwrap();
        assert_eq!(r.forward(&x, Some(&t)).unwrap().dims(), &[2, 16, 4, 4]);
    }

    #[test]
    fn group_choice_divides() {
        for c in [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 64] {
            let g = groups_for(c);
            assert_eq!(c % g, 0);
        }
    }
}
