use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::network::{component, Model};

const MAGIC: &[u8; 4] = b"CDSG";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every parameter, plus optional optimizer state.
    Full,
    /// Causal encoder, fusion, segmentation decoder and causality head only.
    Inference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: CheckpointKind,
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Single-file container: magic, schema version, JSON header, then the
/// tensors as little-endian `f32` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Free-form metadata (training config, epoch, optimizer step, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            schema_version: SCHEMA_VERSION,
            kind: self.kind,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data.get(e.offset * 4..(e.offset + n) * 4).ok_or_else(|| bad("truncated tensor data"))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name, Tensor::new(e.shape, values)));
        }
        Ok(Checkpoint { kind: header.kind, model: header.model, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Keeps only the inference components' parameters.
    pub fn pruned(&self) -> Checkpoint {
        let keep = |name: &str| component::INFERENCE.iter().any(|c| name.starts_with(&format!("{c}.")));
        Checkpoint {
            kind: CheckpointKind::Inference,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().filter(|(n, _)| keep(n)).cloned().collect(),
        }
    }
}

impl Model {
    /// Parameters as a checkpoint of the given kind.
    pub fn to_checkpoint(&self, kind: CheckpointKind, meta: serde_json::Value) -> Checkpoint {
        let full = Checkpoint {
            kind: CheckpointKind::Full,
            model: self.config.clone(),
            meta,
            tensors: self
                .params
                .ids()
                .map(|id| (self.params.name(id).to_string(), self.params.value(id).clone()))
                .collect(),
        };
        match kind {
            CheckpointKind::Full => full,
            CheckpointKind::Inference => full.pruned(),
        }
    }

    /// Restores a model. Inference checkpoints yield a model without the
    /// training-only branches.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::build(ckpt.model.clone(), 0, ckpt.kind == CheckpointKind::Full)?;
        model.load_params(ckpt)?;
        Ok(model)
    }

    /// Overwrites every parameter of this model from `ckpt`.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let t = ckpt.tensor(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != self.params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.value(id).shape()
                )));
            }
            *self.params.value_mut(id) = t.clone();
        }
        Ok(())
    }
}
