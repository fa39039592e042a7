//! Little-endian binary encoding shared by every model and data file.
//!
//! A tensor is `"E2ET"`, format version `u32`, rank `u32`, dims `u32[rank]`,
//! then the `f64` payload. Named tensors prefix that with a `u32`-length
//! UTF-8 name.

use std::path::{Path, PathBuf};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"E2ET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(m);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    /// `u32` byte length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.magic(TENSOR_MAGIC).u32(FORMAT_VERSION);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f64s(t.values())
    }

    /// Count, then each parameter as name + tensor, in name order.
    pub fn named_tensors(&mut self, store: &ParamStore) -> &mut Self {
        self.u32(store.len() as u32);
        for (name, p) in store.iter() {
            self.str(name).tensor(&p.tensor);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: impl Into<PathBuf>) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.into(),
        }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(
            &self.path,
            format!("{} (at byte {})", reason.into(), self.pos),
        )
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(self.err(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn expect_version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        self.expect_magic(TENSOR_MAGIC)?;
        self.expect_version()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let values = self.f64s(n)?;
        Tensor::new(shape, values).map_err(|e| self.err(e.to_string()))
    }

    /// Reads named tensors written by [`ByteWriter::named_tensors`]; every
    /// tensor is marked trainable.
    pub fn named_tensors(&mut self) -> Result<ParamStore> {
        let n = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let t = self.tensor()?;
            store
                .insert(&name, t, true)
                .map_err(|e| self.err(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_at_end() {
            Ok(())
        } else {
            Err(self.err("trailing bytes"))
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Single-tensor file: just the tensor encoding.
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = ByteWriter::new();
    w.tensor(t);
    w.write_to(path)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let t = r.tensor()?;
    r.expect_end()?;
    Ok(t)
}
