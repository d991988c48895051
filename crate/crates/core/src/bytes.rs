//! Little-endian byte cursor helpers shared by the on-disk formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a payload; running past the end is a truncation error whose
/// offset is relative to `base`.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated { offset: self.offset(), needed: n - self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let at = self.offset();
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Corrupt(format!("name at offset {at} is not valid UTF-8")))
    }

    /// `ndims: u8` followed by `dims: u32` each; returns the shape and its
    /// element count.
    pub fn shape(&mut self) -> Result<(Vec<usize>, usize)> {
        let ndims = self.u8()? as usize;
        if ndims == 0 {
            return Err(Error::Corrupt(format!("zero-rank shape at offset {}", self.offset())));
        }
        let mut shape = Vec::with_capacity(ndims);
        let mut count: usize = 1;
        for _ in 0..ndims {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(Error::Corrupt(format!("zero dimension at offset {}", self.offset())));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Corrupt("element count overflows".into()))?;
            shape.push(d);
        }
        Ok((shape, count))
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Split `bytes` into (magic, payload-after-magic, stored CRC), verifying the
/// magic and minimum length. The CRC covers everything after the magic.
pub(crate) fn split_framed<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    min_len: usize,
) -> Result<(&'a [u8], u32)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { offset: bytes.len(), needed: min_len - bytes.len() });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic { expected: *magic, found: bytes[..4].to_vec() });
    }
    if bytes.len() < min_len {
        return Err(Error::Truncated { offset: bytes.len(), needed: min_len - bytes.len() });
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    Ok((body, stored))
}

pub(crate) fn check_crc(body: &[u8], stored: u32) -> Result<()> {
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::Crc { stored, computed });
    }
    Ok(())
}

pub(crate) fn write_name(w: &mut ByteWriter, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::invalid(format!("layer name of {} bytes exceeds 65535", name.len())))?;
    w.u16(len);
    w.bytes(name.as_bytes());
    Ok(())
}

pub(crate) fn write_shape(w: &mut ByteWriter, shape: &[usize]) -> Result<()> {
    let ndims = u8::try_from(shape.len())
        .map_err(|_| Error::invalid(format!("rank {} exceeds 255", shape.len())))?;
    w.u8(ndims);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        w.u32(d);
    }
    Ok(())
}
