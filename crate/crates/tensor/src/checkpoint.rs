//! Named-tensor checkpoint format.
//!
//! Layout (little endian): magic `NFCK`, `u32` version, `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u64` dimensions and the `f32` data.

use std::io::{Read, Write};

use thiserror::Error;

use crate::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet<f32>, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = c.u32()?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if out.id(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = c.u64()?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            shape.push(d as usize);
        }
        let bytes = elems
            .checked_mul(4)
            .filter(|&b| b <= (buf.len() - c.pos) as u64)
            .ok_or(CheckpointError::Truncated(c.pos))?;
        let data: Vec<f32> = c
            .take(bytes as usize)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.insert(name, Tensor::from_vec(&shape, data).expect("length checked"));
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(out)
}
