//! Binary model checkpoint.
//!
//! Layout, little-endian: `"MLCK"`, version u16, activation u8, reserved u8,
//! step u64, lr0 f64, decay_gamma f64, batch_size u32, max_batches u64,
//! dim count u32, dims u32[], then every layer's `W` (row-major) and `b` as
//! f64, then a CRC-32 of all preceding bytes.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::mlp::{Activation, Layer, Mlp};
use super::SgdConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint dims {found:?} do not match expected {expected:?}")]
    DimMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp,
    pub cfg: SgdConfig,
    pub step: u64,
}

pub fn encode_checkpoint(model: &Mlp, cfg: &SgdConfig, step: u64) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::with_capacity(48 + 4 * dims.len() + 8 * model.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.activation().code());
    out.push(0);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&cfg.lr0.to_le_bytes());
    out.extend_from_slice(&cfg.decay_gamma.to_le_bytes());
    out.extend_from_slice(&(cfg.batch_size as u32).to_le_bytes());
    out.extend_from_slice(&cfg.max_batches.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in model.params_iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crate::wire::crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::CorruptCheckpoint(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |m: &str| CheckpointError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 4 + 4 {
        return Err(corrupt("truncated header"));
    }
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let activation = Activation::from_code(c.u8()?).ok_or_else(|| corrupt("unknown activation"))?;
    c.u8()?;
    let step = c.u64()?;
    let cfg = SgdConfig {
        lr0: c.f64()?,
        decay_gamma: c.f64()?,
        batch_size: c.u32()? as usize,
        max_batches: c.u64()?,
    };
    let n_dims = c.u32()? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(corrupt("implausible layer count"));
    }
    let dims = (0..n_dims)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n_params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let expected_len = c.pos + 8 * n_params + 4;
    if bytes.len() != expected_len {
        return Err(CheckpointError::CorruptCheckpoint(format!(
            "length {} but header implies {expected_len}",
            bytes.len()
        )));
    }
    let stored = u32::from_le_bytes(bytes[expected_len - 4..].try_into().unwrap());
    if stored != crate::wire::crc32(&bytes[..expected_len - 4]) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut layers = Vec::with_capacity(n_dims - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let wv = (0..fan_in * fan_out).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        let bv = (0..fan_out).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        layers.push(Layer {
            w: Array2::from_shape_vec((fan_out, fan_in), wv).map_err(|e| corrupt(&e.to_string()))?,
            b: Array1::from(bv),
        });
    }
    let model = Mlp::from_layers(layers, activation).map_err(|e| corrupt(&e.to_string()))?;
    Ok(Checkpoint { model, cfg, step })
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(path: &Path, model: &Mlp, cfg: &SgdConfig, step: u64) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model, cfg, step))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it has the expected layer widths.
pub fn load_checkpoint_with_dims(path: &Path, dims: &[usize]) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    if ck.model.dims() != dims {
        return Err(CheckpointError::DimMismatch {
            expected: dims.to_vec(),
            found: ck.model.dims(),
        });
    }
    Ok(ck)
}
