//! Weight checkpoints: one file holding a JSON metadata record followed by
//! named little-endian f64 tensors.
//!
//! ```text
//! b"FDCKPT01"
//! u64 metadata length, metadata JSON (UTF-8)
//! u64 tensor count
//! per tensor: u32 name length, name, 4 x u64 NCHW shape, f64 data
//! ```
//!
//! Tensor names are `param/<name>`, `buffer/<name>/mean`,
//! `buffer/<name>/var` and `velocity/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use facedet_core::graph::RunningStats;
use facedet_core::model::Detector;
use facedet_core::optim::Sgd;
use facedet_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Digest of the architecture section of the configuration.
    pub model_hash: String,
    /// Digest of the whole configuration snapshot.
    pub config_hash: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub model: String,
    /// The configuration snapshot (TOML).
    pub config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(meta: CheckpointMeta, model: &Detector, sgd: Option<&Sgd>) -> Self {
        let mut tensors = BTreeMap::new();
        for (_, p) in model.params().iter() {
            tensors.insert(format!("param/{}", p.name), p.value.clone());
        }
        for (name, s) in model.buffers().iter() {
            tensors.insert(format!("buffer/{name}/mean"), Tensor::channel_vector(s.mean.clone()));
            tensors.insert(format!("buffer/{name}/var"), Tensor::channel_vector(s.var.clone()));
        }
        if let Some(sgd) = sgd {
            for ((_, p), v) in model.params().iter().zip(sgd.velocity()) {
                tensors.insert(format!("velocity/{}", p.name), v.clone());
            }
        }
        Self { meta, tensors }
    }

    fn take(&self, name: &str, shape: [usize; 4]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Copies parameters and normalization statistics into `model`, which
    /// must have the same architecture.
    pub fn restore_model(&self, model: &mut Detector) -> Result<()> {
        let mut values = Vec::new();
        for (_, p) in model.params().iter() {
            values.push(self.take(&format!("param/{}", p.name), p.value.shape())?.clone());
        }
        for (p, v) in model.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        let mut stats: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (name, s) in model.buffers().iter() {
            let shape = [1, s.mean.len(), 1, 1];
            stats.push((
                self.take(&format!("buffer/{name}/mean"), shape)?.data().to_vec(),
                self.take(&format!("buffer/{name}/var"), shape)?.data().to_vec(),
            ));
        }
        for ((_, s), (mean, var)) in model.buffers_mut().iter_mut().zip(stats) {
            *s = RunningStats { mean, var, ..*s };
        }
        Ok(())
    }

    /// Momentum buffers for `model`'s parameters.
    pub fn velocity(&self, model: &Detector) -> Result<Vec<Tensor>> {
        model
            .params()
            .iter()
            .map(|(_, p)| Ok(self.take(&format!("velocity/{}", p.name), p.value.shape())?.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a facedet checkpoint".into()));
        }
        let n = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u64()? as usize;
            }
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted run never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
