//! Binary checkpoint: magic, version, JSON header, tensor table.
//!
//! ```text
//! "ALCK" | u32 version | u32 json_len | json | u32 n_tensors
//! per tensor: u32 name_len | name | u8 dtype (0 = f32) | u32 rank | u64 dims[rank] | f32 LE data
//! ```
//! All integers are little-endian. Tensors whose name starts with `optim.`
//! carry optimizer state; the rest are model parameters in canonical order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ParamSet, Tensor};
use super::transformer::ModelState;
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    /// Optimizer tensors, each named `optim.<slot>/<param>`.
    pub optimizer: Vec<Tensor<f32>>,
    /// Free-form metadata (step counter, seeds, run config).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(state: ModelState<f32>) -> Self {
        Self {
            state,
            optimizer: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    #[serde(default)]
    meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn save_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<(), ModelError> {
    let header = Header {
        config: ckpt.state.config.clone(),
        vocab_hash: format!("{:016x}", ckpt.state.vocab_hash),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let tensors: Vec<&Tensor<f32>> = ckpt.state.params.tensors.iter().chain(&ckpt.optimizer).collect();

    let mut buf = Vec::with_capacity(64 + json.len() + 4 * ckpt.state.num_parameters());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint. With `expected_vocab` set, a checkpoint bound to a
/// different vocabulary hash is refused.
pub fn load_checkpoint<R: Read>(mut source: R, expected_vocab: Option<u64>) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(json_len)?).map_err(|e| bad(e.to_string()))?;
    let vocab_hash = u64::from_str_radix(&header.vocab_hash, 16).map_err(|_| bad("bad vocab hash"))?;
    if let Some(expected) = expected_vocab {
        if expected != vocab_hash {
            return Err(ModelError::VocabMismatch {
                model: vocab_hash,
                vocab: expected,
            });
        }
    }

    let count = c.u32()? as usize;
    let mut params = Vec::new();
    let mut optimizer = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor size overflow"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("tensor size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor { name, shape, data };
        if t.name.starts_with(OPTIM_PREFIX) {
            optimizer.push(t);
        } else {
            params.push(t);
        }
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let state = ModelState::from_parts(header.config, ParamSet { tensors: params }, vocab_hash)?;
    Ok(Checkpoint {
        state,
        optimizer,
        meta: header.meta,
    })
}
