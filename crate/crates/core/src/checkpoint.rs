//! Single-file archive of named `f64` tensors plus a JSON metadata block.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ASAGEOCK"
//! version    u32      1
//! meta_len   u64      followed by meta_len bytes of UTF-8 JSON
//! count      u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, ndim x u64 dims
//!   data     prod(dims) x f64
//! ```
//!
//! Tensors are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ASAGEOCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => {
                Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("validated at decode"))
            }
            _ => Err(Error::Checkpoint(format!(
                "expected a 2-D tensor, found shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        match self.shape[..] {
            [n] => Ok(Array1::from_vec(self.data[..n].to_vec())),
            _ => Err(Error::Checkpoint(format!(
                "expected a 1-D tensor, found shape {:?}",
                self.shape
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated archive while reading {what}"
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(
            32 + meta.len()
                + self
                    .tensors
                    .values()
                    .map(|t| 16 + t.data.len() * 8)
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode an archive. Every length is checked against the remaining
    /// input before anything is allocated.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic; not a checkpoint archive".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported archive version {version}"
            )));
        }
        let meta_len = r.len("metadata length")?;
        let meta = r.take(meta_len, "metadata")?;
        let metadata: Value = serde_json::from_slice(meta)
            .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
        let count = r.len("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has rank {ndim}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.len("dimension")?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` size overflows")))?;
                shape.push(d);
            }
            let bytes_needed = numel
                .checked_mul(8)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("truncated archive in tensor `{name}`"))
                })?;
            let data = r
                .take(bytes_needed, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors
                .insert(name.clone(), Tensor { shape, data })
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after archive",
                r.remaining()
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
