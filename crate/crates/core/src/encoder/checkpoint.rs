//! Binary checkpoint format.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "DRLABCKP"
//! version      u32      1
//! vocab_hash   u64
//! embed_dim    u64
//! hidden_dim   u64
//! out_dim      u64
//! seed         u64      initialization seed
//! config_hash  u64      hash of the producing run config (0 if none)
//! params       f32[]    embedding (V x embed), w1 (hidden x embed), b1,
//!                       w2 (out x hidden), b2; row-major
//! adam_step    u64
//! adam_m       f32[]    same layout as params
//! adam_v       f32[]    same layout as params
//! ```

use std::fs;
use std::path::Path;

use super::model::{EncoderConfig, EncoderModel, ParamBlocks};
use super::optim::AdamState;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRLABCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub opt_state: AdamState,
    pub config_hash: u64,
}

fn put_blocks(buf: &mut Vec<u8>, blocks: &ParamBlocks<f32>) {
    for b in blocks.blocks() {
        for v in b {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &EncoderModel, opt: &AdamState, config_hash: u64) -> Vec<u8> {
    let c = &model.config;
    let n = model.params.len();
    let mut buf = Vec::with_capacity(64 + 12 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [c.vocab_hash_size, c.embed_dim, c.hidden_dim, c.out_dim] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    put_blocks(&mut buf, &model.params);
    buf.extend_from_slice(&opt.step.to_le_bytes());
    put_blocks(&mut buf, &opt.m);
    put_blocks(&mut buf, &opt.v);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blocks(&mut self, cfg: &EncoderConfig) -> Result<ParamBlocks<f32>> {
        let mut out = ParamBlocks::<f32>::zeros(cfg);
        for b in out.blocks_mut() {
            let raw = self.take(b.len() * 4)?;
            for (dst, chunk) in b.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
    }
    let config = EncoderConfig {
        vocab_hash_size: dims[0],
        embed_dim: dims[1],
        hidden_dim: dims[2],
        out_dim: dims[3],
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint dimensions: {e}")))?;
    let expected = 8 + 4 + 6 * 8 + 8 + ParamBlocks::<f32>::zeros(&config).len() * 12;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint is {} bytes, dimensions imply {expected}",
            bytes.len()
        )));
    }
    let seed = r.u64()?;
    let config_hash = r.u64()?;
    let params = r.blocks(&config)?;
    let step = r.u64()?;
    let m = r.blocks(&config)?;
    let v = r.blocks(&config)?;
    Ok(Checkpoint {
        model: EncoderModel {
            config,
            params,
            seed,
        },
        opt_state: AdamState { step, m, v },
        config_hash,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &EncoderModel,
    opt: &AdamState,
    config_hash: u64,
) -> Result<()> {
    fs::write(path, encode_checkpoint(model, opt, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
