//! Fixed-width little-endian bit packing.
//!
//! Value `j` occupies stream bits `[j·w, (j+1)·w)`; stream bit `i` is bit
//! `i % 8` of byte `i / 8`. There is no padding between values and the last
//! byte is zero-padded.

use crate::error::{Error, Result};

/// Number of bytes needed for `count` values of `width` bits.
pub fn packed_len(count: usize, width: u32) -> usize {
    (count * width as usize).div_ceil(8)
}

/// Appends bit-packed values to a byte buffer.
#[derive(Debug, Default)]
pub struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            buf: Vec::with_capacity(bytes),
            ..Self::default()
        }
    }

    /// Writes the low `width` bits of `value`; `width <= 32`.
    #[inline]
    pub fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 32);
        debug_assert!(width == 64 || value >> width == 0);
        self.acc |= value << self.nbits;
        self.nbits += width;
        while self.nbits >= 8 {
            self.buf.push(self.acc as u8);
            self.acc >>= 8;
            self.nbits -= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.buf.push(self.acc as u8);
        }
        self.buf
    }
}

/// Reads bit-packed values back.
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    #[inline]
    pub fn read(&mut self, width: u32) -> Result<u64> {
        while self.nbits < width {
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| Error::Malformed("bit stream truncated".into()))?;
            self.acc |= u64::from(byte) << self.nbits;
            self.pos += 1;
            self.nbits += 8;
        }
        let v = self.acc & ((1u64 << width) - 1);
        self.acc >>= width;
        self.nbits -= width;
        Ok(v)
    }
}

pub fn pack(values: &[u64], width: u32) -> Vec<u8> {
    let mut w = BitWriter::with_capacity(packed_len(values.len(), width));
    for &v in values {
        w.write(v, width);
    }
    w.finish()
}

pub fn unpack(bytes: &[u8], count: usize, width: u32) -> Result<Vec<u64>> {
    if bytes.len() != packed_len(count, width) {
        return Err(Error::Malformed(format!(
            "expected {} packed bytes for {count} x {width} bits, got {}",
            packed_len(count, width),
            bytes.len()
        )));
    }
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.read(width)).collect()
}
