//! Checkpoint format: a JSON metadata block (config echo, epoch, seed,
//! loss history) followed by named f32 tensors. Round trips are
//! bit-exact.
//!
//! File layout (little-endian):
//!   magic "SCKP1\0"
//!   u64 metadata length, then that many bytes of JSON
//!   u32 tensor count
//!   per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank],
//!   f32 data in row-major order

use crate::error::{Error, Result};
use crate::model::{HeadNorm, ModelConfig, ModelParams};
use crate::numerics::RngStream;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SCKP1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss_history: Vec<f64>,
    /// AdamW step count when optimizer state is included.
    #[serde(default)]
    pub opt_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, TensorData)>,
}

fn tensor_of(a: &Array2<f32>) -> TensorData {
    TensorData {
        dims: vec![a.nrows(), a.ncols()],
        data: a.iter().copied().collect(),
    }
}

fn array_of(name: &str, t: &TensorData) -> Result<Array2<f32>> {
    if t.dims.len() != 2 {
        return Err(Error::shape(format!(
            "tensor {name} has rank {}, expected 2",
            t.dims.len()
        )));
    }
    Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
        .map_err(|e| Error::shape(format!("tensor {name}: {e}")))
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f32>, meta: CheckpointMeta) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tensor_of(t)))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Append optimizer moment estimates as `opt.m.*` / `opt.v.*` tensors.
    pub fn attach_opt_state(
        &mut self,
        step: u64,
        moments: &[(String, Array2<f32>, Array2<f32>)],
    ) {
        self.meta.opt_step = Some(step);
        for (name, m, v) in moments {
            self.tensors.push((format!("opt.m.{name}"), tensor_of(m)));
            self.tensors.push((format!("opt.v.{name}"), tensor_of(v)));
        }
    }

    /// Reconstruct model parameters; decoder, class token, and feature
    /// normalization presence are inferred from the stored tensor names.
    pub fn to_params(&self) -> Result<ModelParams<f32>> {
        let cfg = &self.meta.model;
        cfg.validate()?;
        let mut params = ModelParams::<f32>::init(cfg, &mut RngStream::new(0, 0))?;

        let model_tensors: BTreeMap<&str, &TensorData> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .map(|(n, t)| (n.as_str(), t))
            .collect();

        if !model_tensors.keys().any(|n| n.starts_with("dec")) {
            params.discard_decoder();
        }
        if model_tensors.contains_key("head_norm.mean") {
            params.head_norm = Some(HeadNorm {
                mean: Array2::zeros((1, cfg.enc_dim)),
                var: Array2::from_elem((1, cfg.enc_dim), 1.0),
            });
        }

        let mut used = 0usize;
        for (name, tensor) in params.named_tensors_mut() {
            let stored = model_tensors.get(name.as_str()).ok_or_else(|| {
                Error::shape(format!("checkpoint is missing tensor {name}"))
            })?;
            let arr = array_of(&name, stored)?;
            if arr.dim() != tensor.dim() {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    tensor.dim()
                )));
            }
            *tensor = arr;
            used += 1;
        }
        if used != model_tensors.len() {
            let expected: Vec<String> =
                params.named_tensors().into_iter().map(|(n, _)| n).collect();
            let extras: Vec<&str> = model_tensors
                .keys()
                .filter(|n| !expected.iter().any(|e| e == *n))
                .copied()
                .collect();
            return Err(Error::shape(format!(
                "checkpoint carries unknown tensors: {extras:?}"
            )));
        }
        Ok(params)
    }

    /// Optimizer moments keyed by parameter name, if stored.
    pub fn opt_state(&self) -> Result<Option<BTreeMap<String, (Array2<f32>, Array2<f32>)>>> {
        if self.meta.opt_step.is_none() {
            return Ok(None);
        }
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                let m = array_of(name, t)?;
                let vname = format!("opt.v.{param}");
                let v = self
                    .tensors
                    .iter()
                    .find(|(n, _)| n == &vname)
                    .ok_or_else(|| Error::shape(format!("missing {vname}")))?;
                out.insert(param.to_string(), (m, array_of(&vname, &v.1)?));
            }
        }
        Ok(Some(out))
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::config(format!("metadata serialization: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::format(
                    *pos as u64,
                    format!("unexpected end of file while reading {what}"),
                ));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let magic = take(&mut pos, 6, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let len = take(&mut pos, 8, "metadata length")?;
        let meta_len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let meta_offset = pos as u64;
        let meta_bytes = take(&mut pos, meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::format(meta_offset, format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                meta_offset,
                format!("unsupported format version {}", meta.format_version),
            ));
        }

        let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nl = u32::from_le_bytes(take(&mut pos, 4, "name length")?.try_into().unwrap());
            let name_offset = pos as u64;
            let name = String::from_utf8(take(&mut pos, nl as usize, "name")?.to_vec())
                .map_err(|_| Error::format(name_offset, "tensor name is not UTF-8"))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap());
            let mut dims = Vec::with_capacity(rank as usize);
            let mut total = 1usize;
            for _ in 0..rank {
                let d =
                    u32::from_le_bytes(take(&mut pos, 4, "dimension")?.try_into().unwrap());
                dims.push(d as usize);
                total = total.saturating_mul(d as usize);
            }
            let raw = take(&mut pos, 4 * total, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, TensorData { dims, data }));
        }
        if pos != bytes.len() {
            return Err(Error::format(
                pos as u64,
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.serialize()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::deserialize(&bytes)
    }
}
