use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "angiogen-ckpt/1";
const META_KEY: &str = "angiogen";

/// A safetensors file of f32 parameters plus one JSON metadata entry holding
/// the format tag, kind, step counter, config snapshot and free-form extras.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: usize,
    pub config: serde_json::Value,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    kind: String,
    step: usize,
    config: serde_json::Value,
    extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_store<C: Serialize>(
        store: &ParamStore,
        prefixes: &[&str],
        kind: &str,
        step: usize,
        config: &C,
    ) -> Result<Self> {
        let tensors = prefixes
            .iter()
            .flat_map(|p| store.named_tensors(p))
            .collect();
        Ok(Checkpoint {
            kind: kind.to_string(),
            step,
            config: serde_json::to_value(config).map_err(|e| Error::invalid(e.to_string()))?,
            extra: BTreeMap::new(),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bufs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let vals = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            bufs.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = bufs
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::invalid(format!("tensor {n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = Meta {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_string(&meta).expect("serialisable");
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        safetensors::serialize_to_file(views, Some(info), path).map_err(|e| match e {
            safetensors::SafeTensorError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(path, "missing checkpoint metadata"))?;
        let meta: Meta = serde_json::from_str(raw).map_err(|e| Error::format(path, e))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown format {:?}", meta.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(path, format!("tensor {name} is not f32")));
            }
            let vals: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(vals, view.shape(), &Device::Cpu)?));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            kind: meta.kind,
            step: meta.step,
            config: meta.config,
            extra: meta.extra,
            tensors,
        })
    }

    /// Copies every tensor into `store`, converting to its dtype.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            store.set(name, t)?;
        }
        Ok(())
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::invalid(format!("checkpoint config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let s = ParamStore::new(3, DType::F32);
        s.get("enc.w", &[2, 3], Init::Uniform(1.0)).unwrap();
        s.get("dec.b", &[4], Init::Uniform(1.0)).unwrap();
        let mut ck = Checkpoint::from_store(&s, &["enc.", "dec."], "test", 7, &serde_json::json!({"a": 1})).unwrap();
        ck.extra.insert("note".into(), serde_json::json!(1.5));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.step, 7);
        assert_eq!(back.extra["note"], serde_json::json!(1.5));
        let t = ParamStore::new(99, DType::F32);
        back.load_into(&t).unwrap();
        assert_eq!(s.hash("").unwrap(), t.hash("").unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.safetensors")),
            Err(Error::Io { .. })
        ));
    }
}
