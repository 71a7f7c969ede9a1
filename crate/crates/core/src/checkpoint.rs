//! Versioned weight container.
//!
//! Layout, all integers little-endian: `u32` tag length and UTF-8 tag, `u32`
//! config length and UTF-8 JSON config, `u32` array count, then per array a
//! `u32` name length and name, `u32` rank, `u64` extents, and `f32` values in
//! row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const STAGE1_TAG: &str = "s1ckpt.v1";
pub const STAGE2_TAG: &str = "s2ckpt.v1";
pub const UNET_TAG: &str = "unet.v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub config: String,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(tag: &str, config: String, store: &ParamStore<f32>) -> Self {
        let arrays = store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { tag: tag.to_string(), config, arrays }
    }

    /// Overwrites every tensor of `store`.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let named: HashMap<String, Tensor<f32>> = self.arrays.iter().cloned().collect();
        if named.len() != self.arrays.len() {
            return Err(Error::Format("checkpoint repeats a tensor name".into()));
        }
        store.load_named(&named)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.tag);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_tag: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.string()?;
        if tag != expected_tag {
            return Err(Error::Format(format!("expected a {expected_tag} checkpoint, found tag {tag:?}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Tensor::from_vec(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { tag, config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path, expected_tag: &str) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, expected_tag)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated data: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}
