//! Fused row softmax with a single-pass backward. The composite softmax in
//! candle-nn builds five broadcast ops per call, which dominates the cost of
//! attention over a few thousand tokens on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

struct Softmax;
struct SoftmaxGrad;

fn row_len(layout: &Layout) -> usize {
    layout.dims().last().copied().unwrap_or(1).max(1)
}

macro_rules! softmax_rows {
    ($x:expr, $n:expr, $t:ty) => {{
        let mut out = vec![0 as $t; $x.len()];
        for (src, dst) in $x.chunks_exact($n).zip(out.chunks_exact_mut($n)) {
            let m = src.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
            let mut sum = 0 as $t;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                sum += *d;
            }
            let inv = 1 as $t / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        out
    }};
}

/// `dx = y * (g - sum(g * y))` per row.
macro_rules! softmax_grad_rows {
    ($y:expr, $g:expr, $n:expr, $t:ty) => {{
        let mut out = vec![0 as $t; $y.len()];
        for ((y, g), dst) in $y.chunks_exact($n).zip($g.chunks_exact($n)).zip(out.chunks_exact_mut($n)) {
            let dot: $t = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((d, &a), &b) in dst.iter_mut().zip(y).zip(g) {
                *d = a * (b - dot);
            }
        }
        out
    }};
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "softmax" }),
    }
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(l);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows!(contiguous(v, l)?, n, f32)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows!(contiguous(v, l)?, n, f64)),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?;
        Ok(Some(g))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(l1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows!(contiguous(y, l1)?, contiguous(g, l2)?, n, f32))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows!(contiguous(y, l1)?, contiguous(g, l2)?, n, f64))
            }
            _ => candle_core::bail!("softmax grad: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last dimension, differentiable.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}
