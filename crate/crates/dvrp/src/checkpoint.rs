//! Parameter checkpoint file format.
//!
//! Layout: magic `DVRPCKPT`, version `u32`, block count `u32`, then per
//! block a name-length `u16`, the UTF-8 name, offset `u64`, length `u64`;
//! followed by all values as little-endian `f64` in block order. All
//! integers little-endian. Round-trips are bit-exact.
//!
//! Auxiliary `u32` header fields (model shape, resume counters) are carried
//! as length-1 blocks named `meta.<field>` at the front of the block table,
//! with the value stored as an exactly-representable `f64`. Readers split
//! them back out, so a plain parameter checkpoint and a training checkpoint
//! share one format.

use crate::autodiff::ParamVector;
use crate::error::{DvrpError, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DVRPCKPT";
const VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

pub(crate) struct Cursor<'a> {
    pub(crate) data: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) what: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or(DvrpError::Format { what: self.what, detail: "truncated".into() })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A parameter vector plus named `u32` header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, u32)>,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(params: ParamVector) -> Self {
        Self { meta: Vec::new(), params }
    }

    pub fn with_meta(mut self, name: &str, value: u32) -> Self {
        self.meta.push((name.to_string(), value));
        self
    }

    pub fn meta_u32(&self, name: &str) -> Option<u32> {
        self.meta.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let n_blocks = self.meta.len() + self.params.blocks().len();
        buf.extend_from_slice(&(n_blocks as u32).to_le_bytes());

        let mut offset = 0u64;
        let push_entry = |buf: &mut Vec<u8>, name: &str, len: u64, offset: &mut u64| {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(bytes);
            buf.extend_from_slice(&offset.to_le_bytes());
            buf.extend_from_slice(&len.to_le_bytes());
            *offset += len;
        };
        for (name, _) in &self.meta {
            push_entry(&mut buf, &format!("{META_PREFIX}{name}"), 1, &mut offset);
        }
        for b in self.params.blocks() {
            push_entry(&mut buf, &b.name, b.len as u64, &mut offset);
        }
        for &(_, v) in &self.meta {
            buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
        for &v in self.params.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let bad = |detail: String| DvrpError::Format { what: "checkpoint", detail };
        let mut cur = Cursor::new(data, "checkpoint");

        if cur.take(8)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n_blocks = cur.u32()? as usize;

        let mut entries = Vec::with_capacity(n_blocks.min(1 << 16));
        for _ in 0..n_blocks {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| bad("block name is not UTF-8".into()))?
                .to_string();
            let offset = cur.u64()? as usize;
            let len = cur.u64()? as usize;
            entries.push((name, offset, len));
        }
        let total: usize = entries.iter().map(|&(_, _, len)| len).sum();
        let mut values = Vec::with_capacity(total.min(1 << 24));
        for _ in 0..total {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if cur.pos != data.len() {
            return Err(bad("trailing bytes".into()));
        }

        // Offsets must be contiguous in table order.
        let mut expect = 0usize;
        for &(ref name, offset, len) in &entries {
            if offset != expect {
                return Err(bad(format!("non-contiguous block {name}")));
            }
            expect = offset + len;
        }

        let mut meta = Vec::new();
        let mut param_blocks = Vec::new();
        for (name, offset, len) in entries {
            let slice = values[offset..offset + len].to_vec();
            if let Some(field) = name.strip_prefix(META_PREFIX) {
                if len != 1 {
                    return Err(bad(format!("meta field {field} must have length 1")));
                }
                let v = slice[0];
                if v < 0.0 || v > u32::MAX as f64 || v.fract() != 0.0 {
                    return Err(bad(format!("meta field {field} is not a u32")));
                }
                meta.push((field.to_string(), v as u32));
            } else {
                param_blocks.push((name, slice));
            }
        }
        let params = ParamVector::from_blocks(param_blocks)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}
