//! Minimal little-endian binary blobs for model persistence: a 4-byte tag,
//! u32 header words, then a float64 payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(tag: [u8; 4]) -> Self {
        Self { buf: tag.to_vec() }
    }

    pub fn u32(&mut self, v: usize) -> &mut Self {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.f64s(t.data())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub(crate) struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(buf: &'a [u8], tag: [u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: 4,
                found: buf.len(),
            });
        }
        if buf[..4] != tag {
            return Err(Error::BadMagic([buf[0], buf[1], buf[2], buf[3]]));
        }
        Ok(Self { buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(rows, cols, self.f64s(rows * cols)?))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes in model blob",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}
