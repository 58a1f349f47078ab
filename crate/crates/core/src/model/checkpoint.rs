//! Binary checkpoint format.
//!
//! ```text
//! "SSTG" | version u8 = 1
//! repeated, ordered by name:
//!     name_len u16 | name utf-8 | rank u8 | dims u32 x rank | values f32 x prod(dims)
//! crc32 u32 of the repeated section
//! ```
//! All integers and floats are little-endian.

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSTG";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    for name in store.sorted_names() {
        let p = store.by_name(name).expect("listed name");
        let shape = p.tensor.shape();
        payload.extend((name.len() as u16).to_le_bytes());
        payload.extend(name.as_bytes());
        payload.push(shape.len() as u8);
        for &d in shape {
            payload.extend((d as u32).to_le_bytes());
        }
        for v in p.tensor.values() {
            payload.extend((v.f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(payload.len() + 9);
    out.extend(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend(payload);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated record at byte {}", self.pos + 5)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing SSTG magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    let payload = &bytes[5..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let mut entries: Vec<CheckpointEntry> = Vec::new();
    while r.pos < payload.len() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.last().is_some_and(|e| e.name >= name) {
            return Err(Error::Checkpoint(format!("parameter '{name}' out of order")));
        }
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok(entries)
}
