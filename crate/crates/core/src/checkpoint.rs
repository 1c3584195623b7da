//! Versioned binary container of named tensors with a text config preamble.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MFCK" | version u32 | config_len u32 | config bytes (UTF-8 "key = value" lines)
//! repeated until EOF:
//!   name_len u32 | name bytes | dtype u8 (1 = f64) | rank u32 | extents u64 × rank | data
//! ```

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MFCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// In-memory checkpoint: ordered metadata pairs plus ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a metadata entry, keeping first-insertion order.
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        assert!(
            !key.contains(['=', '\n']) && !value.contains('\n'),
            "checkpoint meta must be single-line key = value"
        );
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn push_tensor(&mut self, name: &str, value: Tensor) {
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.tensors.push((name.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut config = String::new();
        for (k, v) in &self.meta {
            config.push_str(k);
            config.push_str(" = ");
            config.push_str(v);
            config.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::BadCheckpoint("config block is not UTF-8".into()))?;
        let mut ck = Checkpoint::new();
        for line in config.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::BadCheckpoint(format!("bad config line `{line}`")))?;
            ck.meta.push((k.to_string(), v.to_string()));
        }
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::BadCheckpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(Error::BadCheckpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::BadCheckpoint(format!("tensor `{name}` too large")))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::BadCheckpoint(format!("tensor `{name}`: {e}")))?;
            ck.tensors.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::TruncatedData {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
