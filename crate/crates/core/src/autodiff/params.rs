//! Named parameter sets and their checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "CYCDAPRM"
//! version  u32       1
//! count    u32       number of tensors
//! repeated count times, in name order:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 bit patterns (u64 each), row-major
//! sha256   32 bytes  digest of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CYCDAPRM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// Inserts (overwriting) every entry of `other`.
    pub fn extend(&mut self, other: Params) {
        self.0.extend(other.0);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_values() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for (name, t) in &self.0 {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = ByteReader::new(body);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut params = Params::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(r.u64()?));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Params(iter.into_iter().collect())
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}
