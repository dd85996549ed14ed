//! Little-endian binary helpers shared by the corpus and checkpoint formats.
//!
//! Every read names the field it is decoding so that truncated or malformed
//! files report exactly where decoding stopped.

use crate::error::{ArlError, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f32>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ArlError::format(
                field,
                format!(
                    "truncated payload: need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.data.len()
                ),
            )),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4], field: &str) -> Result<()> {
        let got = self.take(4, field)?;
        if got != expected {
            return Err(ArlError::format(
                field,
                format!("bad magic {:?}, expected {:?}", got, expected),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| ArlError::format(field, "length overflow"))?;
        let b = self.take(bytes, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| ArlError::format(field, "length overflow"))?;
        let b = self.take(bytes, field)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self, field: &str) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(ArlError::format(
                field,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}
