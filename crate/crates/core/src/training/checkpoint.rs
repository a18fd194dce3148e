//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "BFC1" | u16 version = 1 | u16 flags = 0 | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims… | f32 data…
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BFC1";
const VERSION: u16 = 1;

pub fn encode_checkpoint(named: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint; nothing is returned unless the whole file is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: "file shorter than header and checksum".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let mut c = Cursor {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic (expected BFC1)".into(),
        });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let flags = c.u16("flags")?;
    if flags != 0 {
        return Err(Error::Format {
            offset: 6,
            reason: format!("unsupported flags {flags:#x}"),
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: c.pos,
                reason: format!("tensor `{name}` size overflows"),
            })?;
        let raw = c.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != body_len {
        return Err(Error::Format {
            offset: c.pos,
            reason: "trailing bytes before checksum".into(),
        });
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::Format {
            offset: body_len,
            reason: format!("CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x})"),
        });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, named: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_checkpoint(named)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
