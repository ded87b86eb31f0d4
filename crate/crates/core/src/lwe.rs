//! Error-free LWE encryption of quantization levels.
//!
//! A ciphertext is `A·s + k·(q/2^b) mod q`: the usual LWE error term is
//! replaced by the dither randomness already present in the quantized
//! levels `k`, so decryption recovers the levels exactly and ciphertexts
//! from clients holding different keys can be summed without error growth.
//!
//! Residues are unsigned integers in `[0, q)` with `q <= 2^32`. Reduction is
//! always by explicit remainder, so power-of-two and other moduli share one
//! code path.

use std::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest supported modulus.
pub const MAX_MODULUS: u64 = 1 << 32;

/// The public tuple `(n, m, q, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LweParams {
    n: usize,
    m: usize,
    q: u64,
    b: u32,
}

impl LweParams {
    /// Checks the structural invariants: `n, m >= 1`, `b >= 1`, `2^b < q`,
    /// `2^b | q` and `q <= 2^32`.
    pub fn new(n: usize, m: usize, q: u64, b: u32) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidParams(format!(
                "dimensions must be positive (n = {n}, m = {m})"
            )));
        }
        if b == 0 || b >= 32 {
            return Err(Error::InvalidParams(format!("b = {b} must be in 1..=31")));
        }
        if q > MAX_MODULUS {
            return Err(Error::InvalidParams(format!("q = {q} exceeds 2^32")));
        }
        let levels = 1u64 << b;
        if levels >= q {
            return Err(Error::InvalidParams(format!(
                "2^b = {levels} must be < q = {q}"
            )));
        }
        if !q.is_multiple_of(levels) {
            return Err(Error::InvalidParams(format!(
                "q = {q} is not divisible by 2^b = {levels}"
            )));
        }
        Ok(Self { n, m, q, b })
    }

    /// The experimental configuration `n = 256, m = 768, q = 65536`.
    pub fn experimental(b: u32) -> Result<Self> {
        Self::new(256, 768, 65536, b)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> u64 {
        self.q
    }

    pub fn b(&self) -> u32 {
        self.b
    }

    /// `q / 2^b`, the residue distance between adjacent levels.
    pub fn gamma_step(&self) -> u64 {
        self.q >> self.b
    }

    /// `2^(b-1)`, the largest level magnitude a single client may encrypt.
    pub fn level_bound(&self) -> i64 {
        1i64 << (self.b - 1)
    }

    /// `ceil(log2 q)`, the wire width of one residue.
    pub fn residue_bits(&self) -> u32 {
        residue_bits(self.q)
    }

    /// Same `(n, q, b)` with a different bucket size.
    pub fn with_m(&self, m: usize) -> Result<Self> {
        Self::new(self.n, m, self.q, self.b)
    }

    /// Warnings for every violated constraint of the CPA reduction and of
    /// the communication lemma. The experimental presets violate some of
    /// these on purpose, so they are not errors.
    pub fn validate(&self, check_security: bool) -> Vec<ParamWarning> {
        let mut warnings = Vec::new();
        let (n, m, q) = (self.n as f64, self.m as f64, self.q as f64);
        if check_security {
            if self.m < 3 * self.n {
                warnings.push(ParamWarning::TooFewSamples {
                    m: self.m,
                    n: self.n,
                });
            }
            // delta -> 0 in q/2^(b+1) >= 2 n^(1/2 + delta) m
            let width = q / 2f64.powi(self.b as i32 + 1);
            let required = 2.0 * n.sqrt() * m;
            if width < required {
                warnings.push(ParamWarning::ErrorWidthTooSmall { width, required });
            }
        }
        let min_q = 3f64.powf(-0.5) * 2f64.powi(self.b as i32 + 2) * m.powf(1.5);
        if q < min_q {
            warnings.push(ParamWarning::ModulusBelowCommunicationBound { q: self.q, min_q });
        }
        warnings
    }
}

/// `ceil(log2 q)` for `q >= 2`.
pub fn residue_bits(q: u64) -> u32 {
    debug_assert!(q >= 2);
    64 - (q - 1).leading_zeros()
}

/// Validates raw parameters: structural violations are errors, violated
/// security constraints are returned as warnings.
pub fn validate_params(
    n: usize,
    m: usize,
    q: u64,
    b: u32,
    check_security: bool,
) -> Result<Vec<ParamWarning>> {
    Ok(LweParams::new(n, m, q, b)?.validate(check_security))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamWarning {
    /// `m < 3n`
    TooFewSamples { m: usize, n: usize },
    /// `q / 2^(b+1) < 2 sqrt(n) m`
    ErrorWidthTooSmall { width: f64, required: f64 },
    /// `q < 3^(-1/2) 2^(b+2) m^(3/2)`
    ModulusBelowCommunicationBound { q: u64, min_q: f64 },
}

impl fmt::Display for ParamWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamWarning::TooFewSamples { m, n } => write!(f, "m = {m} < 3n = {}", 3 * n),
            ParamWarning::ErrorWidthTooSmall { width, required } => {
                write!(f, "q/2^(b+1) = {width} < 2 sqrt(n) m = {required:.1}")
            }
            ParamWarning::ModulusBelowCommunicationBound { q, min_q } => {
                write!(f, "q = {q} < 3^(-1/2) 2^(b+2) m^1.5 = {min_q:.4e}")
            }
        }
    }
}

/// Identifier of the only supported expansion function: ChaCha20 keyed by
/// the 32 seed bytes, stream id = bucket index, 32-bit words consumed in
/// output order starting at block 0.
pub const CHACHA20_CTR_V1: &str = "chacha20-ctr-v1";

/// Public seed from which every party regenerates the public matrices.
#[derive(Clone, PartialEq, Eq)]
pub struct Seed {
    bytes: [u8; 32],
    algorithm_id: String,
}

impl Seed {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self::with_algorithm(bytes, CHACHA20_CTR_V1)
    }

    pub fn with_algorithm(bytes: [u8; 32], algorithm_id: impl Into<String>) -> Self {
        Self {
            bytes,
            algorithm_id: algorithm_id.into(),
        }
    }

    /// Derives the seed bytes as `SHA-256("flag-matrix-seed" || x_le)`.
    pub fn from_u64(x: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"flag-matrix-seed");
        h.update(x.to_le_bytes());
        Self::new(h.finalize().into())
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn algorithm_id(&self) -> &str {
        &self.algorithm_id
    }

    /// 64-bit fingerprint carried in message headers so that parties can
    /// detect a matrix mismatch.
    pub fn id(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.algorithm_id.as_bytes());
        h.update([0u8]);
        h.update(self.bytes);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({}, {:016x})", self.algorithm_id, self.id())
    }
}

/// Uniform sampler over `[0, q)` by rejection of `ceil(log2 q)`-bit chunks.
/// Each candidate takes one 32-bit word; when `q` is a power of two no
/// candidate is ever rejected.
#[derive(Debug, Clone, Copy)]
pub struct ResidueSampler {
    q: u64,
    mask: u64,
}

impl ResidueSampler {
    pub fn new(q: u64) -> Self {
        let bits = residue_bits(q);
        let mask = if bits >= 64 {
            u64::MAX
        } else {
            (1u64 << bits) - 1
        };
        Self { q, mask }
    }

    #[inline]
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> u64 {
        loop {
            let x = u64::from(rng.next_u32()) & self.mask;
            if x < self.q {
                return x;
            }
        }
    }
}

/// An `m x n` matrix over `Z_q`, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicMatrix {
    rows: usize,
    cols: usize,
    q: u64,
    entries: Vec<u32>,
}

impl fmt::Debug for PublicMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("q", &self.q)
            .finish_non_exhaustive()
    }
}

impl PublicMatrix {
    /// Wraps explicit entries; every entry must be `< q`.
    pub fn from_entries(rows: usize, cols: usize, q: u64, entries: Vec<u32>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        if let Some(i) = entries.iter().position(|&e| u64::from(e) >= q) {
            return Err(Error::InvalidParams(format!(
                "matrix entry {i} = {} is not below q = {q}",
                entries[i]
            )));
        }
        Ok(Self {
            rows,
            cols,
            q,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// `A·s mod q`.
    pub fn mul_secret(&self, s: &SecretKey) -> Result<Vec<u64>> {
        if s.entries.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: s.entries.len(),
            });
        }
        let q = self.q;
        // Products are < q^2 <= 2^64; a u64 accumulator is enough when the
        // whole row sum stays below 2^64.
        let max_term = (q - 1) as u128 * (q - 1) as u128;
        let narrow = max_term * self.cols as u128 <= u64::MAX as u128;
        let mut out = Vec::with_capacity(self.rows);
        for row in self.entries.chunks_exact(self.cols) {
            let r = if narrow {
                let acc: u64 = row
                    .iter()
                    .zip(&s.entries)
                    .map(|(&a, &x)| u64::from(a) * x)
                    .sum();
                acc % q
            } else {
                let acc: u128 = row
                    .iter()
                    .zip(&s.entries)
                    .map(|(&a, &x)| u128::from(u64::from(a) * x))
                    .sum();
                (acc % u128::from(q)) as u64
            };
            out.push(r);
        }
        Ok(out)
    }
}

/// Expands the bucket-0 public matrix.
pub fn expand_public_matrix(seed: &Seed, params: &LweParams) -> Result<PublicMatrix> {
    expand_bucket_matrix(seed, params, 0)
}

/// Expands the public matrix of bucket `bucket`. Every bucket draws from
/// its own ChaCha20 stream, so buckets never share a mask.
pub fn expand_bucket_matrix(seed: &Seed, params: &LweParams, bucket: u64) -> Result<PublicMatrix> {
    if seed.algorithm_id != CHACHA20_CTR_V1 {
        return Err(Error::UnsupportedAlgorithm(seed.algorithm_id.clone()));
    }
    let mut rng = ChaCha20Rng::from_seed(seed.bytes);
    rng.set_stream(bucket);
    let sampler = ResidueSampler::new(params.q);
    let entries = (0..params.m * params.n)
        .map(|_| sampler.sample(&mut rng) as u32)
        .collect();
    Ok(PublicMatrix {
        rows: params.m,
        cols: params.n,
        q: params.q,
        entries,
    })
}

/// Length-`n` secret vector over `Z_q`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    entries: Vec<u64>,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(n = {})", self.entries.len())
    }
}

impl SecretKey {
    pub fn from_entries(entries: Vec<u64>, q: u64) -> Result<Self> {
        if let Some(i) = entries.iter().position(|&e| e >= q) {
            return Err(Error::InvalidParams(format!(
                "key entry {i} = {} is not below q = {q}",
                entries[i]
            )));
        }
        Ok(Self { entries })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            entries: vec![0; n],
        }
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Componentwise `self + other mod q`.
    pub fn add(&self, other: &SecretKey, q: u64) -> Result<SecretKey> {
        Ok(SecretKey {
            entries: add_mod(&self.entries, &other.entries, q)?,
        })
    }
}

/// Draws a secret uniformly from `Z_q^n`.
pub fn sample_secret<R: RngCore + ?Sized>(rng: &mut R, params: &LweParams) -> SecretKey {
    let sampler = ResidueSampler::new(params.q);
    SecretKey {
        entries: (0..params.n).map(|_| sampler.sample(rng)).collect(),
    }
}

/// Signed quantization levels, one per ciphertext coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LevelVector(Vec<i64>);

impl LevelVector {
    pub fn new(levels: Vec<i64>) -> Self {
        Self(levels)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<i64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<i64>> for LevelVector {
    fn from(v: Vec<i64>) -> Self {
        Self(v)
    }
}

/// Length-`m` ciphertext over `Z_q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    q: u64,
    entries: Vec<u64>,
}

impl Ciphertext {
    pub fn from_entries(entries: Vec<u64>, q: u64) -> Result<Self> {
        if let Some(i) = entries.iter().position(|&e| e >= q) {
            return Err(Error::InvalidParams(format!(
                "ciphertext entry {i} = {} is not below q = {q}",
                entries[i]
            )));
        }
        Ok(Self { q, entries })
    }

    pub fn zero(params: &LweParams) -> Self {
        Self {
            q: params.q,
            entries: vec![0; params.m],
        }
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    pub fn modulus(&self) -> u64 {
        self.q
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn add_mod(a: &[u64], b: &[u64], q: u64) -> Result<Vec<u64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x + y) % q).collect())
}

fn check_dims(params: &LweParams, a: &PublicMatrix, len: usize) -> Result<()> {
    if a.rows != params.m || a.cols != params.n || a.q != params.q {
        return Err(Error::InvalidParams(format!(
            "matrix is {}x{} mod {}, params expect {}x{} mod {}",
            a.rows, a.cols, a.q, params.m, params.n, params.q
        )));
    }
    if len != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            actual: len,
        });
    }
    Ok(())
}

/// `A·s + k·(q/2^b) mod q`. No error term is added.
pub fn encrypt(
    params: &LweParams,
    a: &PublicMatrix,
    s: &SecretKey,
    k: &LevelVector,
) -> Result<Ciphertext> {
    check_dims(params, a, k.len())?;
    let bound = params.level_bound();
    if let Some((index, &level)) = k.0.iter().enumerate().find(|(_, l)| l.abs() > bound) {
        return Err(Error::LevelOutOfRange {
            index,
            level,
            bound,
        });
    }
    let mask = a.mul_secret(s)?;
    let q = params.q as i128;
    let step = params.gamma_step() as i128;
    let entries = mask
        .iter()
        .zip(&k.0)
        .map(|(&x, &level)| ((x as i128 + level as i128 * step).rem_euclid(q)) as u64)
        .collect();
    Ok(Ciphertext {
        q: params.q,
        entries,
    })
}

/// `A·s + k·(q/2^b) + e mod q`, the conventional LWE form with an explicit
/// error vector. Used for the noisy baseline only.
pub fn encrypt_with_error(
    params: &LweParams,
    a: &PublicMatrix,
    s: &SecretKey,
    k: &LevelVector,
    e: &[i64],
) -> Result<Ciphertext> {
    if e.len() != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            actual: e.len(),
        });
    }
    let mut ct = encrypt(params, a, s, k)?;
    let q = params.q as i128;
    for (c, &err) in ct.entries.iter_mut().zip(e) {
        *c = (*c as i128 + err as i128).rem_euclid(q) as u64;
    }
    Ok(ct)
}

/// Componentwise `a + b mod q`.
pub fn add_ciphertexts(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    if a.q != b.q {
        return Err(Error::InvalidParams(format!(
            "moduli differ: {} vs {}",
            a.q, b.q
        )));
    }
    Ok(Ciphertext {
        q: a.q,
        entries: add_mod(&a.entries, &b.entries, a.q)?,
    })
}

/// Maps `x in [0, q)` to its centered representative in `(-q/2, q/2]`.
/// The boundary `x = q/2` (even `q`) maps to `+q/2`.
#[inline]
pub fn decode_centered(x: u64, q: u64) -> i64 {
    debug_assert!(x < q);
    if x <= q / 2 {
        x as i64
    } else {
        x as i64 - q as i64
    }
}

/// Centered `ct - A·s` without dividing by the level step.
pub fn decrypt_residues(
    params: &LweParams,
    a: &PublicMatrix,
    s_sum: &SecretKey,
    ct: &Ciphertext,
) -> Result<Vec<i64>> {
    check_dims(params, a, ct.len())?;
    let mask = a.mul_secret(s_sum)?;
    let q = params.q;
    Ok(ct
        .entries
        .iter()
        .zip(&mask)
        .map(|(&c, &x)| decode_centered((c + q - x) % q, q))
        .collect())
}

/// Recovers the (summed) levels. The residue must be an exact multiple of
/// `q/2^b`; anything else means mismatched keys, parameters or tampering.
pub fn decrypt(
    params: &LweParams,
    a: &PublicMatrix,
    s_sum: &SecretKey,
    ct: &Ciphertext,
) -> Result<LevelVector> {
    let step = params.gamma_step();
    let residues = decrypt_residues(params, a, s_sum, ct)?;
    let mut levels = Vec::with_capacity(residues.len());
    for (index, r) in residues.into_iter().enumerate() {
        if r % step as i64 != 0 {
            return Err(Error::InexactDecryption {
                index,
                residue: r,
                step,
            });
        }
        levels.push(r / step as i64);
    }
    Ok(LevelVector(levels))
}

/// Decryption for ciphertexts carrying an LWE error: the centered residue
/// is rounded to the nearest level (ties away from zero).
pub fn decrypt_rounded(
    params: &LweParams,
    a: &PublicMatrix,
    s_sum: &SecretKey,
    ct: &Ciphertext,
) -> Result<LevelVector> {
    let step = params.gamma_step() as f64;
    let residues = decrypt_residues(params, a, s_sum, ct)?;
    Ok(LevelVector(
        residues
            .into_iter()
            .map(|r| (r as f64 / step).round() as i64)
            .collect(),
    ))
}
