//! Single-file tensor container and the training checkpoint built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "FTNCKPT\0"
//! dtype    u8       0 = f32, 1 = f64
//! meta_len u64      followed by a UTF-8 JSON object with a mandatory "version"
//! count    u32      followed by `count` tensors:
//!   name_len u16, name bytes, ndim u8, dims u64 × ndim, elements
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{json, Map, Value};

use crate::error::{io_err, FtnError, Result};
use crate::harness::config::TrainConfig;
use crate::nn::{ParamEntry, ParamKind, ParamStore};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"FTNCKPT\0";
pub const FORMAT_VERSION: u64 = 1;

fn ckpt_err(msg: impl Into<String>) -> FtnError {
    FtnError::Checkpoint(msg.into())
}

/// Named tensors plus a JSON metadata object.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer<T> {
    pub metadata: Map<String, Value>,
    pub tensors: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> TensorContainer<T> {
    pub fn new(metadata: Map<String, Value>) -> Self {
        let mut metadata = metadata;
        metadata.insert("version".into(), json!(FORMAT_VERSION));
        TensorContainer {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ckpt_err("not a checkpoint container (bad magic)"));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| ckpt_err("unknown dtype tag"))?;
        if dtype != T::DTYPE {
            return Err(ckpt_err(format!(
                "container holds {dtype:?} tensors, {:?} requested",
                T::DTYPE
            )));
        }
        let meta_len = r.u64()? as usize;
        let metadata: Map<String, Value> =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| ckpt_err(format!("metadata: {e}")))?;
        match metadata.get("version").and_then(Value::as_u64) {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(ckpt_err(format!("unsupported container version {v}"))),
            None => return Err(ckpt_err("metadata lacks the mandatory version field")),
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ckpt_err("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let size = dtype.size();
            let raw = r.take(n * size)?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            tensors.push((name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err("trailing bytes after the last tensor"));
        }
        Ok(TensorContainer { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Element type recorded in a container file, without decoding it.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint container (bad magic)"));
    }
    DType::from_tag(bytes[8]).ok_or_else(|| ckpt_err("unknown dtype tag"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err("truncated container"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Position of the shuffling stream, enough to continue it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord<T> {
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    pub store: ParamStore<T>,
    /// SGD momentum buffers keyed by parameter name.
    pub momentum: BTreeMap<String, ArrayD<T>>,
    pub rng: RngState,
    pub best_val_f1: Option<f64>,
    pub class_frequencies: [f64; 2],
}

const PARAM_PREFIX: &str = "param/";
const MOMENTUM_PREFIX: &str = "momentum/";

impl<T: Scalar> CheckpointRecord<T> {
    pub fn to_container(&self) -> TensorContainer<T> {
        let mut params = Map::new();
        for (name, e) in self.store.iter() {
            params.insert(
                name.clone(),
                json!({
                    "kind": match e.kind { ParamKind::Trainable => "trainable", ParamKind::Buffer => "buffer" },
                    "backbone": e.backbone,
                    "pretrained": e.pretrained,
                }),
            );
        }
        let config: Map<String, Value> = self
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect();
        let meta = json!({
            "kind": "checkpoint",
            "epoch": self.epoch,
            "step": self.step,
            "config": config,
            "rng_seed": self.rng.seed,
            "rng_word_pos": self.rng.word_pos.to_string(),
            "best_val_f1": self.best_val_f1,
            "class_frequencies": self.class_frequencies,
            "params": params,
        });
        let mut c = TensorContainer::new(meta.as_object().unwrap().clone());
        for (name, e) in self.store.iter() {
            c.tensors.push((format!("{PARAM_PREFIX}{name}"), e.value.clone()));
        }
        for (name, m) in &self.momentum {
            c.tensors.push((format!("{MOMENTUM_PREFIX}{name}"), m.clone()));
        }
        c
    }

    pub fn from_container(c: TensorContainer<T>) -> Result<Self> {
        let meta = &c.metadata;
        let field = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(format!("metadata lacks '{k}'")));
        let as_usize = |k: &str| -> Result<usize> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| ckpt_err(format!("metadata '{k}' is not an integer")))
        };
        if field("kind")?.as_str() != Some("checkpoint") {
            return Err(ckpt_err("container is not a training checkpoint"));
        }
        let mut config = TrainConfig::default();
        let cfg_map = field("config")?
            .as_object()
            .ok_or_else(|| ckpt_err("metadata 'config' is not an object"))?;
        for (k, v) in cfg_map {
            let v = v.as_str().ok_or_else(|| ckpt_err(format!("config '{k}' is not a string")))?;
            config.set(k, v)?;
        }
        let params = field("params")?
            .as_object()
            .ok_or_else(|| ckpt_err("metadata 'params' is not an object"))?;
        let freq = field("class_frequencies")?
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
            .ok_or_else(|| ckpt_err("metadata 'class_frequencies' malformed"))?;
        let rng = RngState {
            seed: field("rng_seed")?.as_u64().ok_or_else(|| ckpt_err("rng_seed malformed"))?,
            word_pos: field("rng_word_pos")?
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ckpt_err("rng_word_pos malformed"))?,
        };
        let best_val_f1 = field("best_val_f1")?.as_f64();
        let epoch = as_usize("epoch")?;
        let step = as_usize("step")?;

        let mut store = ParamStore::default();
        let mut momentum = BTreeMap::new();
        for (name, t) in c.tensors {
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                let info = params
                    .get(p)
                    .ok_or_else(|| ckpt_err(format!("no metadata for tensor '{p}'")))?;
                let kind = match info.get("kind").and_then(Value::as_str) {
                    Some("trainable") => ParamKind::Trainable,
                    Some("buffer") => ParamKind::Buffer,
                    _ => return Err(ckpt_err(format!("tensor '{p}' has no valid kind"))),
                };
                let flag = |k: &str| info.get(k).and_then(Value::as_bool).unwrap_or(false);
                store.insert(
                    p,
                    ParamEntry {
                        value: t,
                        kind,
                        backbone: flag("backbone"),
                        pretrained: flag("pretrained"),
                    },
                );
            } else if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                momentum.insert(p.to_string(), t);
            } else {
                return Err(ckpt_err(format!("unexpected tensor '{name}'")));
            }
        }
        Ok(CheckpointRecord {
            epoch,
            step,
            config,
            store,
            momentum,
            rng,
            best_val_f1,
            class_frequencies: freq,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(TensorContainer::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_version_check() {
        let mut c = TensorContainer::<f32>::new(Map::new());
        c.tensors.push(("a".into(), ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.0, 5.0, f32::MIN_POSITIVE]).unwrap()));
        c.tensors.push(("scalar".into(), ArrayD::from_elem(IxDyn(&[]), 7.0)));
        let bytes = c.to_bytes();
        assert_eq!(TensorContainer::<f32>::from_bytes(&bytes).unwrap(), c);
        assert!(TensorContainer::<f64>::from_bytes(&bytes).is_err());
        assert!(TensorContainer::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let mut unversioned = c.clone();
        unversioned.metadata.remove("version");
        assert!(TensorContainer::<f32>::from_bytes(&unversioned.to_bytes()).is_err());
    }
}
