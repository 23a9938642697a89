//! `MCM1` parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MCM1"
//! repeat until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u8  dtype (0 = f32, 1 = f64, 2 = u64, 3 = UTF-8 text)
//!   u32 ndim, then ndim x u64 dims
//!   payload: product(dims) elements of dtype (bytes for text)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::real::Real;
use crate::math::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCM1";

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64(Vec<u64>),
    Text(String),
}

impl Field {
    pub fn tensor<T: Real>(t: &Tensor<T>) -> Field {
        match T::DTYPE {
            crate::math::DType::F32 => Field::F32(t.cast()),
            crate::math::DType::F64 => Field::F64(t.cast()),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Field::F32(_) => 0,
            Field::F64(_) => 1,
            Field::U64(_) => 2,
            Field::Text(_) => 3,
        }
    }
}

/// Ordered collection of named fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamFile {
    fields: Vec<(String, Field)>,
}

impl ParamFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, field: Field) {
        self.fields.push((name.into(), field));
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, Field::tensor(t));
    }

    pub fn push_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.push(name, Field::Text(s.into()));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: &[u64]) {
        self.push(name, Field::U64(v.to_vec()));
    }

    pub fn fields(&self) -> &[(String, Field)] {
        &self.fields
    }

    pub fn get(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    fn missing(name: &str) -> Error {
        Error::Invalid(format!("parameter file has no field '{name}'"))
    }

    /// Tensor field converted to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        match self.get(name).ok_or_else(|| Self::missing(name))? {
            Field::F32(t) => Ok(t.cast()),
            Field::F64(t) => Ok(t.cast()),
            _ => Err(Error::Invalid(format!("field '{name}' is not a tensor"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name).ok_or_else(|| Self::missing(name))? {
            Field::Text(s) => Ok(s),
            _ => Err(Error::Invalid(format!("field '{name}' is not text"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name).ok_or_else(|| Self::missing(name))? {
            Field::U64(v) => Ok(v),
            _ => Err(Error::Invalid(format!("field '{name}' is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, f) in &self.fields {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(f.tag());
            let dims: Vec<usize> = match f {
                Field::F32(t) => t.shape().to_vec(),
                Field::F64(t) => t.shape().to_vec(),
                Field::U64(v) => vec![v.len()],
                Field::Text(s) => vec![s.len()],
            };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match f {
                Field::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Field::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Field::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Field::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err("bad magic, expected MCM1".into());
        }
        let mut file = ParamFile::new();
        while cur.pos < bytes.len() {
            let nlen = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec()).map_err(|_| "field name is not UTF-8")?;
            let tag = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            if ndim > 8 {
                return Err(format!("field '{name}': implausible ndim {ndim}"));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("field '{name}': dims overflow"))?;
            let field = match tag {
                0 => {
                    let raw = cur.take(n.checked_mul(4).ok_or("size overflow")?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Field::F32(Tensor::new(dims, data).map_err(|e| e.to_string())?)
                }
                1 => {
                    let raw = cur.take(n.checked_mul(8).ok_or("size overflow")?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Field::F64(Tensor::new(dims, data).map_err(|e| e.to_string())?)
                }
                2 => {
                    let raw = cur.take(n.checked_mul(8).ok_or("size overflow")?)?;
                    Field::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                3 => {
                    let raw = cur.take(n)?;
                    Field::Text(String::from_utf8(raw.to_vec()).map_err(|_| format!("field '{name}': text is not UTF-8"))?)
                }
                t => return Err(format!("field '{name}': unknown dtype tag {t}")),
            };
            file.push(name, field);
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|m| Error::data(path, m))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
