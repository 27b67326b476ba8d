//! Little-endian binary checkpoints.
//!
//! Layout: magic, u32 version, the eleven config fields as u32, u32 tensor
//! count, then per tensor its name (u32 length + UTF-8), u32 rank, u32 dims
//! and f64 data. The file ends with the SHA-256 of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DenoiserParams, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BXGDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn config_fields(c: &ModelConfig) -> [usize; 11] {
    [
        c.grid,
        c.patch,
        c.channels,
        c.d_model,
        c.heads,
        c.blocks,
        c.d_text,
        c.vocab,
        c.ff_mult,
        c.max_tokens,
        c.timesteps,
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes parameters to bytes.
pub fn encode(params: &DenoiserParams) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for f in config_fields(params.config()) {
        put_u32(&mut out, f)?;
    }
    put_u32(&mut out, params.tensors().len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<DenoiserParams, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut c = Cursor { bytes: body, pos: 8 };
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut f = [0usize; 11];
    for v in &mut f {
        *v = c.u32()?;
    }
    let config = ModelConfig {
        grid: f[0],
        patch: f[1],
        channels: f[2],
        d_model: f[3],
        heads: f[4],
        blocks: f[5],
        d_text: f[6],
        vocab: f[7],
        ff_mult: f[8],
        max_tokens: f[9],
        timesteps: f[10],
    };
    let count = c.u32()?;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        named.push((name, t));
    }
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(DenoiserParams::from_named(config, named)?)
}

pub fn write_checkpoint<W: Write>(params: &DenoiserParams, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(&encode(params)?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DenoiserParams, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_checkpoint(params: &DenoiserParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserParams, CheckpointError> {
    decode(&std::fs::read(path)?)
}
