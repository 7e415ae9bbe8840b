use candle_core::{DType, Tensor, D};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear, ParamStore};
use crate::raster::Gray;

/// Maps images to fixed-length feature vectors for the Fréchet distance.
pub trait Embedder {
    /// Identifier written into reports next to the numbers it produced.
    fn id(&self) -> String;
    /// One row per image.
    fn embed(&self, imgs: &[&Gray]) -> Result<Array2<f64>>;
}

/// Maps images to class-probability rows for the Inception score.
pub trait Classifier {
    fn id(&self) -> String;
    fn probabilities(&self, imgs: &[&Gray]) -> Result<Array2<f64>>;
}

struct Trunk {
    _store: ParamStore,
    layers: Vec<Conv2d>,
    head: Option<Linear>,
}

const TRUNK: [(usize, usize); 3] = [(1, 16), (16, 16), (16, 16)];
/// Mean and standard deviation of each final channel.
const FEATURES: usize = 32;
/// Logit multiplier applied after per-image standardisation.
const LOGIT_SCALE: f64 = 4.0;

impl Trunk {
    fn new(seed: u64, classes: Option<usize>) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32);
        store.freeze("");
        let s = store.root();
        let layers = TRUNK
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(&s.sub(format!("conv{i}")), cin, cout, 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = match classes {
            Some(k) => Some(Linear::new(&s.sub("head"), FEATURES, k)?),
            None => None,
        };
        Ok(Trunk { _store: store, layers, head })
    }

    /// Per-channel spatial mean and standard deviation of the last conv
    /// layer, `(N, 32)`.
    fn pooled(&self, imgs: &[&Gray]) -> Result<Tensor> {
        if imgs.is_empty() {
            return Err(Error::invalid("no images to embed"));
        }
        let mut parts = Vec::new();
        for chunk in imgs.chunks(32) {
            let mut h = nn::gray_batch(chunk, DType::F32)?.affine(2.0, -1.0)?;
            for l in &self.layers {
                h = l.forward(&h)?.relu()?;
            }
            let flat = h.flatten_from(2)?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let std = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?.sqrt()?;
            parts.push(Tensor::cat(&[mean, std], 1)?.squeeze(D::Minus1)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

fn to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (n, d) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((n, d), v).map_err(|e| Error::invalid(e.to_string()))
}

/// Frozen, randomly initialised three-layer conv net pooled to per-channel
/// mean and standard deviation (32 features). A stand-in for a pretrained
/// embedder: numbers are comparable only between runs using the same seed.
pub struct RandomConvEmbedder {
    seed: u64,
    trunk: Trunk,
}

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(RandomConvEmbedder { seed, trunk: Trunk::new(seed, None)? })
    }
}

impl Embedder for RandomConvEmbedder {
    fn id(&self) -> String {
        format!("random-conv3-meanstd{FEATURES}-seed{}", self.seed)
    }

    fn embed(&self, imgs: &[&Gray]) -> Result<Array2<f64>> {
        to_array(&self.trunk.pooled(imgs)?)
    }
}

/// The embedder trunk, per-image standardisation of the features, a random
/// linear head and a softmax.
pub struct RandomConvClassifier {
    seed: u64,
    classes: usize,
    trunk: Trunk,
}

impl RandomConvClassifier {
    pub fn new(seed: u64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        Ok(RandomConvClassifier { seed, classes, trunk: Trunk::new(seed, Some(classes))? })
    }
}

impl Classifier for RandomConvClassifier {
    fn id(&self) -> String {
        format!("random-conv3-linear{}-seed{}", self.classes, self.seed)
    }

    fn probabilities(&self, imgs: &[&Gray]) -> Result<Array2<f64>> {
        let f = self.trunk.pooled(imgs)?;
        let centred = f.broadcast_sub(&f.mean_keepdim(D::Minus1)?)?;
        let norm = centred.sqr()?.mean_keepdim(D::Minus1)?.sqrt()?.affine(1.0, 1e-12)?;
        let f = centred.broadcast_div(&norm)?.affine(LOGIT_SCALE, 0.0)?;
        let logits = self.trunk.head.as_ref().expect("classifier has a head").forward(&f)?;
        let mut p = to_array(&logits)?;
        // Softmax in f64 so rows sum to one well within the score's tolerance.
        for mut row in p.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(p)
    }
}
