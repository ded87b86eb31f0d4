//! l∞ clipping and the half-dithered quantizer.
//!
//! Levels are `k_j = round(ĝ_j/Δ + u_j)` with `Δ = 2C/2^b` and a fresh
//! uniform dither `u_j ∈ (-1/2, 1/2]` per coordinate. The dither is never
//! subtracted at the receiver, so dequantization is just `k_j·Δ`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::lwe::LevelVector;

/// Clipping threshold and bit budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    clip: f64,
    bits: u32,
}

impl QuantConfig {
    pub fn new(clip: f64, bits: u32) -> Result<Self> {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::InvalidParams(format!(
                "clip threshold C = {clip} must be > 0"
            )));
        }
        if bits == 0 || bits >= 32 {
            return Err(Error::InvalidParams(format!(
                "b = {bits} must be in 1..=31"
            )));
        }
        Ok(Self { clip, bits })
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// `Δ = 2C / 2^b`.
    pub fn step(&self) -> f64 {
        2.0 * self.clip / (1u64 << self.bits) as f64
    }

    pub fn level_bound(&self) -> i64 {
        1i64 << (self.bits - 1)
    }
}

/// Per-coordinate i.i.d. dither in level units.
#[derive(Debug, Clone)]
pub struct DitherSource {
    kind: DitherKind,
}

#[derive(Debug, Clone)]
enum DitherKind {
    Stream(Box<ChaCha20Rng>),
    Fixed(f64),
}

impl DitherSource {
    pub fn seeded(seed: u64) -> Self {
        Self::from_rng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn from_rng(rng: ChaCha20Rng) -> Self {
        Self {
            kind: DitherKind::Stream(Box::new(rng)),
        }
    }

    /// Always returns `u`. Only meaningful for tests and worked examples.
    pub fn fixed(u: f64) -> Self {
        assert!(u > -0.5 && u <= 0.5, "dither {u} outside (-1/2, 1/2]");
        Self {
            kind: DitherKind::Fixed(u),
        }
    }

    /// One draw, uniform on `(-1/2, 1/2]`.
    #[inline]
    pub fn draw(&mut self) -> f64 {
        match &mut self.kind {
            DitherKind::Stream(rng) => 0.5 - rng.random::<f64>(),
            DitherKind::Fixed(u) => *u,
        }
    }
}

/// `g / max(1, ‖g‖∞ / C)`.
pub fn clip(g: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParams(format!(
            "clip threshold C = {c} must be > 0"
        )));
    }
    let mut norm = 0.0f64;
    for (i, &x) in g.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(i));
        }
        norm = norm.max(x.abs());
    }
    let scale = (norm / c).max(1.0);
    if scale == 1.0 {
        return Ok(g.to_vec());
    }
    Ok(g.iter().map(|&x| x / scale).collect())
}

// Clipping divides by ‖g‖∞/C, which can land one ulp above C.
const CLIP_SLACK: f64 = 1e-12;

/// Dithered quantization of an already clipped vector.
pub fn quantize(
    g_hat: &[f64],
    cfg: &QuantConfig,
    dither: &mut DitherSource,
) -> Result<LevelVector> {
    let limit = cfg.clip * (1.0 + CLIP_SLACK);
    let step = cfg.step();
    let bound = cfg.level_bound();
    let mut levels = Vec::with_capacity(g_hat.len());
    for (index, &x) in g_hat.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(index));
        }
        if x.abs() > limit {
            return Err(Error::NotClipped {
                index,
                value: x,
                clip: cfg.clip,
            });
        }
        // f64::round breaks ties away from zero.
        let k = (x / step + dither.draw()).round() as i64;
        levels.push(k.clamp(-bound, bound));
    }
    Ok(LevelVector::new(levels))
}

/// `k_j · Δ`.
pub fn dequantize(k: &LevelVector, cfg: &QuantConfig) -> Vec<f64> {
    let step = cfg.step();
    k.as_slice().iter().map(|&l| l as f64 * step).collect()
}

/// Empirical moments of the quantization error `ε = dequantized - input`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub samples: usize,
    pub coordinate_mean: Vec<f64>,
    pub coordinate_mean_sq: Vec<f64>,
    /// Mean of `ε_j` over all coordinates and samples.
    pub mean: f64,
    /// Mean of `ε_j²` over all coordinates and samples.
    pub mean_sq: f64,
    /// Mean of `‖ε‖²` over samples.
    pub vector_mean_sq: f64,
}

/// Streaming accumulator behind [`quantization_error_stats`].
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    samples: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl ErrorAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: &[f64], output: &[f64]) -> Result<()> {
        if input.len() != output.len() {
            return Err(Error::DimensionMismatch {
                expected: input.len(),
                actual: output.len(),
            });
        }
        if self.samples == 0 {
            self.sum = vec![0.0; input.len()];
            self.sum_sq = vec![0.0; input.len()];
        } else if self.sum.len() != input.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sum.len(),
                actual: input.len(),
            });
        }
        for j in 0..input.len() {
            let e = output[j] - input[j];
            self.sum[j] += e;
            self.sum_sq[j] += e * e;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<ErrorStats> {
        if self.samples == 0 {
            return Err(Error::TooFew {
                what: "error samples",
                min: 1,
                actual: 0,
            });
        }
        let n = self.samples as f64;
        let d = self.sum.len().max(1) as f64;
        let coordinate_mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let coordinate_mean_sq: Vec<f64> = self.sum_sq.iter().map(|s| s / n).collect();
        let total: f64 = self.sum.iter().sum();
        let total_sq: f64 = self.sum_sq.iter().sum();
        Ok(ErrorStats {
            samples: self.samples,
            coordinate_mean,
            coordinate_mean_sq,
            mean: total / (n * d),
            mean_sq: total_sq / (n * d),
            vector_mean_sq: total_sq / n,
        })
    }
}

/// Moments over `(input, dequantized output)` pairs.
pub fn quantization_error_stats<'a, I>(samples: I) -> Result<ErrorStats>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut acc = ErrorAccumulator::new();
    for (input, output) in samples {
        acc.push(input, output)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[0.5, -0.3], 1.0).unwrap(), vec![0.5, -0.3]);
        assert_eq!(clip(&[2.0, -1.0], 1.0).unwrap(), vec![1.0, -0.5]);
        assert_eq!(clip(&[4.0, 4.0, -4.0], 2.0).unwrap(), vec![2.0, 2.0, -2.0]);
        assert!(matches!(
            clip(&[1.0, f64::NAN], 1.0),
            Err(Error::NonFinite(1))
        ));
        assert!(clip(&[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_stays_zero_under_any_interior_dither() {
        let cfg = QuantConfig::new(1.0, 4).unwrap();
        for u in [-0.49, -0.1, 0.0, 0.3, 0.49] {
            let k = quantize(&[0.0; 4], &cfg, &mut DitherSource::fixed(u)).unwrap();
            assert_eq!(k.as_slice(), &[0; 4]);
        }
    }

    #[test]
    fn single_bit_worked_example() {
        let cfg = QuantConfig::new(1.0, 1).unwrap();
        assert_eq!(cfg.step(), 1.0);
        let k = quantize(&[0.4], &cfg, &mut DitherSource::fixed(0.0)).unwrap();
        assert_eq!(k.as_slice(), &[0]);
        assert_eq!(dequantize(&k, &cfg), vec![0.0]);
    }

    #[test]
    fn ties_break_away_from_zero() {
        let cfg = QuantConfig::new(1.0, 2).unwrap(); // Δ = 0.5
        let k = quantize(&[0.25, -0.25], &cfg, &mut DitherSource::fixed(0.0)).unwrap();
        assert_eq!(k.as_slice(), &[1, -1]);
    }

    #[test]
    fn boundary_levels_are_clamped() {
        let cfg = QuantConfig::new(1.0, 3).unwrap();
        let k = quantize(&[1.0, -1.0], &cfg, &mut DitherSource::fixed(0.5)).unwrap();
        // 4 + 0.5 rounds to 5 and is clamped; -4 + 0.5 rounds to -4.
        assert_eq!(k.as_slice(), &[4, -4]);
    }

    #[test]
    fn unclipped_input_is_rejected() {
        let cfg = QuantConfig::new(1.0, 4).unwrap();
        assert!(matches!(
            quantize(&[0.2, 1.5], &cfg, &mut DitherSource::seeded(0)),
            Err(Error::NotClipped { index: 1, .. })
        ));
    }

    #[test]
    fn dequantize_examples() {
        let cfg = QuantConfig::new(1.0, 8).unwrap();
        assert_eq!(dequantize(&LevelVector::new(vec![128]), &cfg), vec![1.0]);
        assert_eq!(dequantize(&LevelVector::zeros(3), &cfg), vec![0.0; 3]);
    }

    #[test]
    fn error_within_one_step_and_levels_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut dither = DitherSource::seeded(4);
        for bits in [1, 2, 4, 8] {
            let cfg = QuantConfig::new(0.7, bits).unwrap();
            let g: Vec<f64> = (0..2000).map(|_| rng.random_range(-0.7..=0.7)).collect();
            let k = quantize(&g, &cfg, &mut dither).unwrap();
            assert!(k.as_slice().iter().all(|l| l.abs() <= cfg.level_bound()));
            for (x, y) in g.iter().zip(dequantize(&k, &cfg)) {
                assert!((x - y).abs() <= cfg.step() + 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_levels() {
        let cfg = QuantConfig::new(1.0, 6).unwrap();
        let g = [0.1, -0.7, 0.33, 0.999];
        let a = quantize(&g, &cfg, &mut DitherSource::seeded(42)).unwrap();
        let b = quantize(&g, &cfg, &mut DitherSource::seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_stats() {
        let zeros = vec![0.0; 5];
        let stats = quantization_error_stats([(zeros.as_slice(), zeros.as_slice())]).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.mean_sq, 0.0);
        assert!(quantization_error_stats(std::iter::empty()).is_err());
    }

    #[test]
    fn unbiased_for_fixed_input() {
        let cfg = QuantConfig::new(1.0, 4).unwrap();
        let g = [0.0, 0.03, -0.41, 0.77, -1.0, 0.999];
        let mut dither = DitherSource::seeded(11);
        let mut acc = ErrorAccumulator::new();
        let draws = 100_000;
        for _ in 0..draws {
            let k = quantize(&g, &cfg, &mut dither).unwrap();
            acc.push(&g, &dequantize(&k, &cfg)).unwrap();
        }
        let stats = acc.finish().unwrap();
        let tol = 4.0 * cfg.step() / (12.0 * draws as f64).sqrt();
        for (j, m) in stats.coordinate_mean.iter().enumerate() {
            assert!(m.abs() < tol, "coordinate {j}: mean error {m} >= {tol}");
        }
    }

    #[test]
    fn second_moment_below_per_coordinate_bound() {
        let cfg = QuantConfig::new(1.0, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut dither = DitherSource::seeded(6);
        let mut acc = ErrorAccumulator::new();
        for _ in 0..100_000 {
            let g = [rng.random_range(-1.0..=1.0)];
            let k = quantize(&g, &cfg, &mut dither).unwrap();
            acc.push(&g, &dequantize(&k, &cfg)).unwrap();
        }
        let stats = acc.finish().unwrap();
        // C^2 / 2^(2b-2) = 1/64
        assert!(stats.mean_sq <= 1.0 / 64.0, "{}", stats.mean_sq);
    }
}
