//! Communication cost of encrypted versus plain quantized uploads.

use crate::error::{Error, Result};
use crate::lwe::residue_bits;

/// `τ = 1 + (2 + 1.5·log2 m − 0.5·log2 3)/b`, which assumes the smallest
/// modulus the security condition allows, `q = 3^{-1/2}·2^{b+2}·m^{1.5}`.
pub fn comm_factor(b: u32, m: usize) -> Result<f64> {
    if b == 0 || m == 0 {
        return Err(Error::Domain {
            function: "comm_factor",
            detail: format!("need b >= 1 and m >= 1, got b = {b}, m = {m}"),
        });
    }
    let m = m as f64;
    Ok(1.0 + (2.0 + 1.5 * m.log2() - 0.5 * 3f64.log2()) / b as f64)
}

/// Plain quantized upload: `d·b` bits.
pub fn plain_bits(d: usize, b: u32) -> u64 {
    d as u64 * u64::from(b)
}

/// Ciphertext upload for `d` (padded) coordinates: `d·⌈log2 q⌉` bits.
pub fn ct_bits(d: usize, q: u64) -> u64 {
    d as u64 * u64::from(residue_bits(q))
}

/// `⌈log2 q⌉ / b`: the factor actually paid for a concrete modulus.
pub fn tau_measured(q: u64, b: u32) -> f64 {
    f64::from(residue_bits(q)) / f64::from(b)
}

/// `(b + 15)/b`, the ratio tabulated for the experimental configuration.
pub fn table_factor(b: u32) -> f64 {
    f64::from(b + 15) / f64::from(b)
}
