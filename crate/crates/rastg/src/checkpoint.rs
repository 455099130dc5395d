//! Model checkpoints.
//!
//! Layout: the 8-byte magic `RASTGCKP`, a little-endian `u32` version, a
//! `u64` header length, a JSON header, the little-endian `f64` payload
//! (parameters in header order, then each normalization layer's running mean
//! and variance) and a trailing CRC-32 of everything before it.

use std::path::Path;

use rastg_core::autograd::BatchNormStats;
use rastg_core::model::{ModelConfig, ModelState, RastGModel};
use rastg_core::skeleton::JointLayout;
use rastg_core::NdArray;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"RASTGCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormEntry {
    channels: usize,
    momentum: f64,
    eps: f64,
    updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    layout: JointLayout,
    data: DataConfig,
    score_scale: f64,
    epoch: usize,
    params: Vec<ParamEntry>,
    norms: Vec<NormEntry>,
}

/// Everything needed to rebuild a trained model and feed it new sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub layout: JointLayout,
    pub data: DataConfig,
    /// Divisor applied to scores during training.
    pub score_scale: f64,
    /// Epoch whose weights are stored.
    pub epoch: usize,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn from_model(model: &RastGModel, data: DataConfig, score_scale: f64, epoch: usize) -> Self {
        Self {
            model: model.config().clone(),
            layout: model.layout().clone(),
            data,
            score_scale,
            epoch,
            state: model.state(),
        }
    }

    pub fn build_model(&self) -> Result<RastGModel> {
        let mut m = RastGModel::new(self.model.clone(), self.layout.clone())?;
        m.load_state(&self.state)?;
        Ok(m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            layout: self.layout.clone(),
            data: self.data,
            score_scale: self.score_scale,
            epoch: self.epoch,
            params: self
                .state
                .params
                .iter()
                .map(|(name, v)| ParamEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
            norms: self
                .state
                .bn
                .iter()
                .map(|s| NormEntry {
                    channels: s.channels(),
                    momentum: s.momentum,
                    eps: s.eps,
                    updates: s.updates,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let values = self.state.params.iter().flat_map(|(_, v)| v.data().iter()).chain(
            self.state
                .bn
                .iter()
                .flat_map(|s| s.running_mean.iter().chain(&s.running_var)),
        );
        for x in values {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format(path, format!("checkpoint: {reason}"));
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 24 {
            return Err(bad("truncated before header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(bad(format!(
                "version {version}: checksum mismatch, file is corrupt or truncated"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let mut payload = body[20 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected = h
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum::<usize>()
            + h.norms.iter().map(|n| 2 * n.channels).sum::<usize>();
        if (body.len() - 20 - hlen) != expected * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, header declares {} values",
                body.len() - 20 - hlen,
                expected
            )));
        }
        let mut params = Vec::with_capacity(h.params.len());
        for p in &h.params {
            let n = p.shape.iter().product();
            let data: Vec<f64> = payload.by_ref().take(n).collect();
            params.push((p.name.clone(), NdArray::new(p.shape.clone(), data)?));
        }
        let bn = h
            .norms
            .iter()
            .map(|n| BatchNormStats {
                running_mean: payload.by_ref().take(n.channels).collect(),
                running_var: payload.by_ref().take(n.channels).collect(),
                momentum: n.momentum,
                eps: n.eps,
                updates: n.updates,
            })
            .collect();
        h.model.validate()?;
        h.layout.validate()?;
        Ok(Self {
            model: h.model,
            layout: h.layout,
            data: h.data,
            score_scale: h.score_scale,
            epoch: h.epoch,
            state: ModelState { params, bn },
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &ckpt.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(path, &bytes)
}
