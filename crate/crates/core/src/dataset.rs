//! `NFND` binary dataset: fixed-size little-endian records of tokenized flows.
//!
//! ```text
//! header : "NFND" u16 version(=1)
//! record : u8 proto, u8 valid_burst_count, i32 label (-1 = none),
//!          1308 x u32 token id, 1308 x u8 validity, 12 x 5 x f32 metadata
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tokenizer::{MetadataVector, TokenizedFlow, GRID_LEN, MAX_BURSTS, META_WIDTH, VOCAB_SIZE};

pub const MAGIC: &[u8; 4] = b"NFND";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 6;
pub const RECORD_LEN: usize = 1 + 1 + 4 + GRID_LEN * 4 + GRID_LEN + MAX_BURSTS * META_WIDTH * 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u16 },
    #[error("truncated data at offset {offset}")]
    Truncated { offset: usize },
    #[error("invalid record at offset {offset}: {reason}")]
    InvalidRecord { offset: usize, reason: String },
    #[error("label {0} cannot be stored (labels must be non-negative)")]
    UnstorableLabel(i32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_dataset<W: Write>(mut sink: W, flows: &[TokenizedFlow]) -> Result<(), DatasetError> {
    sink.write_all(MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    let mut buf = Vec::with_capacity(RECORD_LEN);
    for tf in flows {
        buf.clear();
        encode_record(tf, &mut buf)?;
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

fn encode_record(tf: &TokenizedFlow, buf: &mut Vec<u8>) -> Result<(), DatasetError> {
    let label = match tf.label {
        None => -1,
        Some(l) if l < 0 => return Err(DatasetError::UnstorableLabel(l)),
        Some(l) => l,
    };
    buf.push(tf.proto);
    buf.push(tf.valid_burst_count() as u8);
    buf.extend_from_slice(&label.to_le_bytes());
    for &t in &tf.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend(tf.valid.iter().map(|&v| v as u8));
    for m in &tf.metadata {
        for x in m.0 {
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    Ok(())
}

pub fn read_dataset(bytes: &[u8]) -> Result<Vec<TokenizedFlow>, DatasetError> {
    if bytes.len() < HEADER_LEN {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            DatasetError::BadMagic { offset: 0 }
        } else {
            DatasetError::Truncated { offset: bytes.len() }
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic { offset: 0 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion { offset: 4, version });
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % RECORD_LEN != 0 {
        let whole = body.len() / RECORD_LEN;
        return Err(DatasetError::Truncated {
            offset: HEADER_LEN + whole * RECORD_LEN,
        });
    }
    body.chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| decode_record(rec, HEADER_LEN + i * RECORD_LEN))
        .collect()
}

fn decode_record(rec: &[u8], offset: usize) -> Result<TokenizedFlow, DatasetError> {
    let invalid = |at: usize, reason: String| DatasetError::InvalidRecord {
        offset: offset + at,
        reason,
    };
    let proto = rec[0];
    let stored_valid_bursts = rec[1] as usize;
    let label = i32::from_le_bytes([rec[2], rec[3], rec[4], rec[5]]);
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l),
        l => return Err(invalid(2, format!("label {l}"))),
    };
    let mut at = 6;
    let mut tokens = Vec::with_capacity(GRID_LEN);
    for i in 0..GRID_LEN {
        let b = &rec[at + 4 * i..at + 4 * i + 4];
        let t = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if t as usize >= VOCAB_SIZE {
            return Err(invalid(at + 4 * i, format!("token id {t} outside vocabulary")));
        }
        tokens.push(t);
    }
    at += 4 * GRID_LEN;
    let mut valid = Vec::with_capacity(GRID_LEN);
    for i in 0..GRID_LEN {
        valid.push(match rec[at + i] {
            0 => false,
            1 => true,
            v => return Err(invalid(at + i, format!("validity byte {v}"))),
        });
    }
    at += GRID_LEN;
    let mut metadata = Vec::with_capacity(MAX_BURSTS);
    for b in 0..MAX_BURSTS {
        let mut m = [0f32; META_WIDTH];
        for (k, x) in m.iter_mut().enumerate() {
            let o = at + 4 * (b * META_WIDTH + k);
            *x = f32::from_bits(u32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]));
        }
        metadata.push(MetadataVector(m));
    }
    let tf = TokenizedFlow {
        tokens,
        valid,
        metadata,
        proto,
        label,
    };
    if tf.valid_burst_count() != stored_valid_bursts {
        return Err(invalid(
            1,
            format!(
                "valid_burst_count {stored_valid_bursts} disagrees with grid ({})",
                tf.valid_burst_count()
            ),
        ));
    }
    Ok(tf)
}

pub fn save_dataset(path: &Path, flows: &[TokenizedFlow]) -> Result<(), DatasetError> {
    let file = fs::File::create(path)?;
    write_dataset(io::BufWriter::new(file), flows)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TokenizedFlow>, DatasetError> {
    read_dataset(&fs::read(path)?)
}
