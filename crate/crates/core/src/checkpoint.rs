//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "CFCK"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of JSON (configs, vocabulary, scaler, labels, counters)
//! n_arrays   u32
//! n_arrays × {
//!     name_len u32, name (UTF-8),
//!     ndim u32, ndim × u64 dims,
//!     prod(dims) × f64
//! }
//! ```
//!
//! Arrays are the trainable tensors under their own names, batch-norm buffers as
//! `buffer.tst.layer{l}.norm{1,2}.{mean,var}`, and Adam moments as `adam.{m,v}.<name>`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ehr::{MinMaxScaler, ScalerParams, TargetMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerState};
use crate::params::ParamSet;
use crate::text::Vocab;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub scaler: Option<ScalerParams>,
    pub train: TrainConfig,
    pub label_names: Vec<String>,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub train_fraction: f64,
    pub target: TargetMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub trainer: Trainer,
    pub label_names: Vec<String>,
    /// Split settings, so evaluation can rebuild the same held-out patients.
    pub train_fraction: f64,
    pub target: TargetMode,
}

struct Array {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn buffer_arrays(model: &Model) -> Vec<Array> {
    let mut out = Vec::new();
    for (l, pair) in model.tst.stats.layers.iter().enumerate() {
        for (k, s) in pair.iter().enumerate() {
            for (field, v) in [("mean", &s.mean), ("var", &s.var)] {
                out.push(Array {
                    name: format!("buffer.tst.layer{l}.norm{}.{field}", k + 1),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    let got = r.take(len).read_to_end(&mut v)?;
    if got as u64 != len {
        return Err(bad("truncated file"));
    }
    Ok(v)
}

impl Checkpoint {
    pub fn new(
        model: Model,
        trainer: Trainer,
        label_names: Vec<String>,
        train_fraction: f64,
        target: TargetMode,
    ) -> Self {
        Self {
            model,
            trainer,
            label_names,
            train_fraction,
            target,
        }
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            vocab: self.model.vocab.words().to_vec(),
            scaler: self.model.scaler.params().copied(),
            train: self.trainer.config.clone(),
            label_names: self.label_names.clone(),
            epoch: self.trainer.epoch,
            optimizer_step: self.trainer.optimizer.state.step,
            train_fraction: self.train_fraction,
            target: self.target,
        }
    }

    fn arrays(&self) -> Vec<Array> {
        let mut out: Vec<Array> = self
            .model
            .tensors()
            .into_iter()
            .map(|t| Array {
                name: t.name,
                shape: t.shape,
                data: t.data.to_vec(),
            })
            .collect();
        out.extend(buffer_arrays(&self.model));
        let state = &self.trainer.optimizer.state;
        if !state.m.is_empty() {
            let names: Vec<(String, Vec<usize>)> = self
                .model
                .tensors()
                .into_iter()
                .map(|t| (t.name, t.shape))
                .collect();
            for (tag, moments) in [("m", &state.m), ("v", &state.v)] {
                for ((name, shape), data) in names.iter().zip(moments) {
                    out.push(Array {
                        name: format!("adam.{tag}.{name}"),
                        shape: shape.clone(),
                        data: data.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta())?;
        let arrays = self.arrays();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        b.extend_from_slice(&meta);
        b.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in arrays {
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if &read_exact::<4>(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(&mut r)?;
        let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(&mut r, meta_len)?)?;
        let n = read_u32(&mut r)?;
        let mut arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)?;
            let name = String::from_utf8(read_bytes(&mut r, u64::from(name_len))?)
                .map_err(|_| bad("array name is not UTF-8"))?;
            let ndim = read_u32(&mut r)?;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = read_bytes(&mut r, len as u64 * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            arrays.insert(name, (shape, data));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last array"));
        }

        let scaler = meta
            .scaler
            .map(MinMaxScaler::from_params)
            .unwrap_or_default();
        let mut model = Model::init(meta.model.clone(), Vocab::from_words(meta.vocab), scaler, 0)?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (s, data) = arrays
                .remove(name)
                .ok_or_else(|| bad(format!("missing array {name}")))?;
            if s != shape {
                return Err(bad(format!(
                    "array {name} has shape {s:?}, expected {shape:?}"
                )));
            }
            Ok(data)
        };

        let specs: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        let values = specs
            .iter()
            .map(|(name, shape)| take(name, shape))
            .collect::<Result<Vec<_>>>()?;
        for (dst, v) in model.tensors_mut().into_iter().zip(values) {
            dst.copy_from_slice(&v);
        }
        for (l, pair) in model.tst.stats.layers.iter_mut().enumerate() {
            for (k, s) in pair.iter_mut().enumerate() {
                let d = s.mean.len();
                s.mean = take(&format!("buffer.tst.layer{l}.norm{}.mean", k + 1), &[d])?;
                s.var = take(&format!("buffer.tst.layer{l}.norm{}.var", k + 1), &[d])?;
            }
        }
        let mut optimizer = Optimizer::new(meta.train.optimizer, &model);
        if !optimizer.state.m.is_empty() {
            let mut m = Vec::with_capacity(specs.len());
            let mut v = Vec::with_capacity(specs.len());
            for (name, shape) in &specs {
                m.push(take(&format!("adam.m.{name}"), shape)?);
                v.push(take(&format!("adam.v.{name}"), shape)?);
            }
            optimizer.state = OptimizerState {
                step: meta.optimizer_step,
                m,
                v,
            };
        } else {
            optimizer.state.step = meta.optimizer_step;
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(bad(format!("unexpected array {extra}")));
        }
        Ok(Self {
            model,
            trainer: Trainer {
                config: meta.train,
                optimizer,
                epoch: meta.epoch,
            },
            label_names: meta.label_names,
            train_fraction: meta.train_fraction,
            target: meta.target,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
