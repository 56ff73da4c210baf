//! Little-endian binary encoding shared by every on-disk format.
//!
//! A tensor is written as its axis count (`u32`), each axis length (`u32`),
//! then its values as row-major `f32`.

use super::Tensor;
use crate::error::{Error, Result};

const MAX_RANK: usize = 8;

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

pub(crate) fn put_len(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Range(format!("length {n} exceeds u32")))?;
    put_u32(buf, v);
    Ok(())
}

pub fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_len(buf, t.rank())?;
    for &d in t.shape() {
        put_len(buf, d)?;
    }
    buf.reserve(4 * t.len());
    for &v in t.data() {
        put_f32(buf, v);
    }
    Ok(())
}

/// Cursor over an in-memory file that reports byte offsets on failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn corrupt<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Corrupt { offset: self.offset(), msg: msg.into() })
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.corrupt(format!(
                "truncated: wanted {n} bytes, {} left",
                self.remaining()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.offset();
        let got = self.bytes(magic.len())?;
        if got != magic {
            return Err(Error::Corrupt { offset: at, msg: "bad magic".into() });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as f64)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let at = self.offset();
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Corrupt { offset: at, msg: "invalid UTF-8".into() })
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.len()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Corrupt { offset: at, msg: format!("implausible tensor rank {rank}") });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.len()?;
            count = count.saturating_mul(d);
            shape.push(d);
        }
        if count.saturating_mul(4) > self.remaining() {
            return self.corrupt(format!("truncated tensor: {count} values declared"));
        }
        let raw = self.bytes(4 * count)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Corrupt { offset: at, msg: e.to_string() })
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    Ok(buf)
}

/// Decode one tensor that must span the whole buffer.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let t = r.tensor()?;
    if !r.is_at_end() {
        return r.corrupt("trailing bytes after tensor");
    }
    Ok(t)
}
