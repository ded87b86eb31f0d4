//! Splitting a length-`d` level vector into `m`-sized buckets.

use crate::error::{Error, Result};
use crate::lwe::LevelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucketing {
    d: usize,
    m: usize,
}

impl Bucketing {
    pub fn new(d: usize, m: usize) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidParams(format!(
                "bucketing needs d, m >= 1 (d = {d}, m = {m})"
            )));
        }
        Ok(Self { d, m })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bucket_size(&self) -> usize {
        self.m
    }

    /// `⌈d/m⌉`.
    pub fn num_buckets(&self) -> usize {
        self.d.div_ceil(self.m)
    }

    /// Zero levels appended to the last bucket.
    pub fn pad(&self) -> usize {
        self.padded_dim() - self.d
    }

    pub fn padded_dim(&self) -> usize {
        self.num_buckets() * self.m
    }

    pub fn bucketize(&self, k: &LevelVector) -> Result<Vec<LevelVector>> {
        if k.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: k.len(),
            });
        }
        Ok(k.as_slice()
            .chunks(self.m)
            .map(|chunk| {
                let mut v = chunk.to_vec();
                v.resize(self.m, 0);
                LevelVector::new(v)
            })
            .collect())
    }

    /// Concatenates the buckets and drops the padding.
    pub fn debucketize(&self, buckets: &[LevelVector]) -> Result<LevelVector> {
        if buckets.len() != self.num_buckets() {
            return Err(Error::DimensionMismatch {
                expected: self.num_buckets(),
                actual: buckets.len(),
            });
        }
        let mut out = Vec::with_capacity(self.padded_dim());
        for b in buckets {
            if b.len() != self.m {
                return Err(Error::DimensionMismatch {
                    expected: self.m,
                    actual: b.len(),
                });
            }
            out.extend_from_slice(b.as_slice());
        }
        out.truncate(self.d);
        Ok(LevelVector::new(out))
    }
}
