//! SNT1 tensor container.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "SNT1"                        4 bytes
//! tensor count                  u32
//! per tensor:
//!   name length                 u16
//!   name                        UTF-8 bytes
//!   ndim                        u8
//!   dims                        ndim x u32
//!   data                        prod(dims) x f32, row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNT1";

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate name `{name}`")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.rank()).map_err(|_| Error::Format("rank > 255".into()))?;
        out.push(ndim);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4).map_err(|_| Error::Format("bad magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate name `{name}`")));
        }
        let ndim = cur.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}`: element count overflows")))?;
        let bytes = cur.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(out)
}

pub fn write_snt1(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_snt1(path: impl AsRef<Path>) -> Result<NamedTensors> {
    decode(&std::fs::read(path)?)
}

/// Name-indexed view used by the weight loaders.
#[derive(Debug, Default)]
pub struct TensorMap(BTreeMap<String, Tensor>);

impl TensorMap {
    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if t.dims() != dims {
            return Err(Error::shape(
                "load weights",
                format!("`{name}` has dims {:?}, expected {dims:?}", t.dims()),
            ));
        }
        Ok(t)
    }

    pub fn take_opt(&mut self, name: &str, dims: &[usize]) -> Result<Option<Tensor>> {
        if self.0.contains_key(name) {
            self.take(name, dims).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Errors if any tensor was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(name) => Err(Error::Format(format!("unexpected tensor `{name}`"))),
            None => Ok(()),
        }
    }
}

impl From<NamedTensors> for TensorMap {
    fn from(v: NamedTensors) -> Self {
        Self(v.into_iter().collect())
    }
}
