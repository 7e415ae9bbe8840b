//! Small neural-network toolkit on top of candle: a named parameter store
//! with per-name seeded initialisation, the layers shared by the VAE and the
//! diffusion network, and self-describing checkpoints.

mod checkpoint;
mod layers;
mod ops;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use ops::softmax_last_dim;
pub use layers::{
    groups_for, softplus, timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock, SelfAttention,
};

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

struct Inner {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    frozen: Vec<String>,
    strict: bool,
}

/// Named, ordered collection of trainable tensors.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    inner: RefCell<Inner>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            seed,
            dtype,
            inner: RefCell::new(Inner {
                vars: Vec::new(),
                index: HashMap::new(),
                frozen: Vec::new(),
                strict: false,
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// When strict, requesting a parameter that is not already present is an
    /// error instead of a fresh initialisation.
    pub fn set_strict(&self, strict: bool) {
        self.inner.borrow_mut().strict = strict;
    }

    /// Parameters under `prefix` are handed out detached from the graph and
    /// excluded from [`ParamStore::trainable`].
    pub fn freeze(&self, prefix: &str) {
        self.inner.borrow_mut().frozen.push(prefix.to_string());
    }

    fn is_frozen(inner: &Inner, name: &str) -> bool {
        inner.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => {
                let mut r = rng::stream(self.seed, &format!("param:{name}"));
                (0..n).map(|_| r.gen_range(-b..=b)).collect()
            }
        };
        Ok(Tensor::from_vec(vals, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if let Some(&i) = inner.index.get(name) {
            let var = &inner.vars[i].1;
            if var.dims() != shape {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    var.dims()
                )));
            }
            let t = var.as_tensor().clone();
            return Ok(if Self::is_frozen(&inner, name) { t.detach() } else { t });
        }
        if inner.strict {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint has no parameter {name}"
            )));
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        let t = var.as_tensor().clone();
        let frozen = Self::is_frozen(&inner, name);
        let idx = inner.vars.len();
        inner.vars.push((name.to_string(), var));
        inner.index.insert(name.to_string(), idx);
        Ok(if frozen { t.detach() } else { t })
    }

    /// Inserts or overwrites a parameter with the given value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        let mut inner = self.inner.borrow_mut();
        if let Some(&i) = inner.index.get(name) {
            inner.vars[i].1.set(&value)?;
        } else {
            let idx = inner.vars.len();
            inner.vars.push((name.to_string(), Var::from_tensor(&value)?));
            inner.index.insert(name.to_string(), idx);
        }
        Ok(())
    }

    /// Non-frozen variables whose names start with one of `prefixes`.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<Var> {
        let inner = self.inner.borrow();
        inner
            .vars
            .iter()
            .filter(|(n, _)| !Self::is_frozen(&inner, n))
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// `(name, tensor)` pairs, sorted by name.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let inner = self.inner.borrow();
        let mut out: Vec<_> = inner
            .vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over the names and little-endian f32 values of every parameter
    /// under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors(prefix) {
            h.update(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

/// A prefix into a [`ParamStore`]; models are built by descending scopes.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{name}", self.prefix)
            },
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&format!("{}.{name}", self.prefix), shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks grayscale images into a `(B, 1, H, W)` tensor.
pub fn gray_batch(imgs: &[&crate::raster::Gray], dtype: DType) -> Result<Tensor> {
    let (h, w) = imgs.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut v = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.dim() != (h, w) {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        v.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(v, (imgs.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks `(3, H, W)` colour images into a `(B, 3, H, W)` tensor.
pub fn rgb_batch(imgs: &[&crate::raster::Rgb], dtype: DType) -> Result<Tensor> {
    let dims = imgs.first().map(|i| i.dim()).unwrap_or((3, 0, 0));
    let mut v = Vec::with_capacity(imgs.len() * dims.0 * dims.1 * dims.2);
    for img in imgs {
        if img.dim() != dims {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        v.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(v, (imgs.len(), dims.0, dims.1, dims.2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, 1, H, W)` tensor back into images.
pub fn to_grays(t: &Tensor) -> Result<Vec<crate::raster::Gray>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::invalid(format!("expected one channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| {
            ndarray::Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                .expect("sizes agree")
        })
        .collect())
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam with betas (0.9, 0.999) and no weight decay.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}
