//! Binary checkpoint codec.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DEK1"  u16 version
//! u32 config length, config text (model key=value lines, optional "[train]" section)
//! u32 tensor count
//! per tensor: u16 name length, name, u8 dtype tag, u8 ndim, u32 dims…, payload
//! u32 CRC-32 of every byte between the version field and the CRC
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::model::{DeepEmotionModel, ModelConfig, PARAM_NAMES};
use crate::optim::TrainConfig;
use crate::tensor::Tensor;
use crate::{Result, Scalar};

pub const MAGIC: &[u8; 4] = b"DEK1";
pub const VERSION: u16 = 1;
const TRAIN_SECTION: &str = "[train]";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Serializes the model (and optionally the training configuration).
pub fn encode<T: Scalar>(model: &DeepEmotionModel<T>, train: Option<&TrainConfig>) -> Vec<u8> {
    let mut config = model.config().to_kv();
    if let Some(tc) = train {
        config.push_str(TRAIN_SECTION);
        config.push('\n');
        config.push_str(&tc.to_kv());
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_TAG);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[6..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { offset: self.pos, needed: n })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct RawTensor<'a> {
    name: &'a [u8],
    dtype: u8,
    shape: Vec<usize>,
    payload: &'a [u8],
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    pub model: DeepEmotionModel<T>,
    pub train: Option<TrainConfig>,
}

/// Parses and validates a checkpoint. Framing is checked first (magic,
/// version, lengths), then the CRC, then the contents.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Decoded<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let config_len = r.u32()? as usize;
    let config = r.take(config_len)?;
    let count = r.u32()? as usize;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.take(name_len)?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => return Err(malformed(alloc::format!("unknown dtype tag {other}")).into()),
        };
        let elems = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| malformed("tensor size overflows"))?;
        let payload = r.take(elems)?;
        raw.push(RawTensor { name, dtype, shape, payload });
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(malformed(alloc::format!("{} trailing bytes after the CRC", bytes.len() - r.pos)).into());
    }
    let computed = crc32fast::hash(&bytes[6..body_end]);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed }.into());
    }

    let config = core::str::from_utf8(config).map_err(|_| malformed("config block is not UTF-8"))?;
    let (model_kv, train_kv) = match config.split_once(TRAIN_SECTION) {
        Some((m, t)) => (m, Some(t)),
        None => (config, None),
    };
    let model_cfg = ModelConfig::from_kv(model_kv)?;
    let train = train_kv.map(TrainConfig::from_kv).transpose()?;
    let mut model = DeepEmotionModel::<T>::build(model_cfg, model_cfg.seed)?;
    if raw.len() != PARAM_NAMES.len() {
        return Err(malformed(alloc::format!("expected {} tensors, found {}", PARAM_NAMES.len(), raw.len())).into());
    }
    for (rt, expected) in raw.iter().zip(PARAM_NAMES) {
        let name = core::str::from_utf8(rt.name).map_err(|_| malformed("tensor name is not UTF-8"))?;
        if name != expected {
            return Err(malformed(alloc::format!("tensor {name:?} where {expected:?} was expected")).into());
        }
        if rt.dtype != T::DTYPE_TAG {
            return Err(malformed(alloc::format!(
                "tensor {name} has dtype tag {}, loader wants {}",
                rt.dtype,
                T::DTYPE_TAG
            ))
            .into());
        }
        let data: Vec<T> = rt.payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(&rt.shape, data).map_err(|e| malformed(alloc::format!("tensor {name}: {e}")))?;
        model
            .set_param(name, t)
            .map_err(|e| malformed(e.to_string()))?;
    }
    Ok(Decoded { model, train })
}
