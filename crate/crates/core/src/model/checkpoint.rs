//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "BLKDEC\0\x01"
//! version    u32       1
//! config     8 x u64   vocab_size, d_model, d_hidden, num_layers,
//!                      attn_heads, k_heads, max_context, seed
//! partition  3 x (u64 length, length x f32)
//!                      base, head_extension, vocab_projection
//! ```
//!
//! Nothing may follow the last partition.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::tiny::{ModelConfig, Partition, TinyBlockModel};

pub const MAGIC: [u8; 8] = *b"BLKDEC\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {at}")]
    Truncated { at: usize },
    #[error("{0} trailing bytes after last partition")]
    Trailing(usize),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

pub fn encode(model: &TinyBlockModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.num_parameters());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.d_hidden, c.num_layers, c.attn_heads, c.k_heads, c.max_context] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for p in Partition::ALL {
        let values = model.partition(p);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated { at: self.buf.len() })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Invalid("integer overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TinyBlockModel, CheckpointError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let config = ModelConfig {
        vocab_size: r.usize()?,
        d_model: r.usize()?,
        d_hidden: r.usize()?,
        num_layers: r.usize()?,
        attn_heads: r.usize()?,
        k_heads: r.usize()?,
        max_context: r.usize()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let mut parts: [Vec<f64>; 3] = Default::default();
    for part in &mut parts {
        let len = r.usize()?;
        let raw = r.take(len.checked_mul(4).ok_or(CheckpointError::Truncated { at: bytes.len() })?)?;
        *part = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.at));
    }
    TinyBlockModel::from_parts(config, parts).map_err(|e| CheckpointError::Invalid(e.to_string()))
}

pub fn save_checkpoint(model: &TinyBlockModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyBlockModel, CheckpointError> {
    decode(&fs::read(path)?)
}
