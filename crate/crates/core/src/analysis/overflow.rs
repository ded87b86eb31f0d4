//! Overflow probability of the aggregated plaintext and the clipping
//! threshold that keeps it below a target.
//!
//! Model: client gradients are i.i.d. `N(0, σ_g²)` per coordinate, so one
//! coordinate of the aggregate is `N(0, Nσ_g²)` and exceeds `C` in absolute
//! value with probability `erfc(C / √(2Nσ_g²))`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::special::{erfc, erfc_inv};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverflowModel {
    pub n_clients: usize,
    pub sigma_g: f64,
    pub clip: f64,
}

impl OverflowModel {
    pub fn new(n_clients: usize, sigma_g: f64, clip: f64) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::Domain {
                function: "OverflowModel",
                detail: "N must be positive".into(),
            });
        }
        for (name, v) in [("sigma_g", sigma_g), ("C", clip)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain {
                    function: "OverflowModel",
                    detail: format!("{name} = {v} must be positive"),
                });
            }
        }
        Ok(Self {
            n_clients,
            sigma_g,
            clip,
        })
    }

    /// `C / √(2Nσ_g²)`.
    pub fn z(&self) -> f64 {
        self.clip / (2.0 * self.n_clients as f64 * self.sigma_g * self.sigma_g).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverflowProbability {
    pub value: f64,
    /// The bracket `1 - 2·erfc(z)` went negative and the result was clamped.
    pub clamped: bool,
}

/// `P_o = 1 − [1 − 2·erfc(C/√(2Nσ_g²))]^N`, clamped to `[0, 1]`.
///
/// Compared with [`exact_overflow_probability`] over `N` coordinates this
/// doubles the per-coordinate tail, so it is a conservative upper bound
/// (roughly twice the exact value when small).
pub fn overflow_probability(model: &OverflowModel) -> OverflowProbability {
    let tail = 2.0 * erfc(model.z());
    let clamped = tail > 1.0;
    let value = if clamped {
        1.0
    } else {
        -((model.n_clients as f64) * (-tail).ln_1p()).exp_m1()
    };
    OverflowProbability {
        value: value.clamp(0.0, 1.0),
        clamped,
    }
}

/// `Pr[max_j |S_j| > C]` for `dim` independent aggregate coordinates:
/// `1 − (1 − erfc(z))^dim`.
pub fn exact_overflow_probability(model: &OverflowModel, dim: usize) -> f64 {
    let tail = erfc(model.z());
    // 1 - (1-p)^k via log1p/expm1 keeps precision when p is tiny.
    -((dim as f64) * (-tail).ln_1p()).exp_m1()
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain {
            function: "min_clip_threshold",
            detail: format!("delta = {delta} outside (0, 1)"),
        });
    }
    Ok(())
}

/// `erfc⁻¹(½ − ½(1−δ)^{1/N})`, the normalized threshold `z` with `P_o(z) = δ`.
fn normalized_threshold(n_clients: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n_clients == 0 {
        return Err(Error::Domain {
            function: "min_clip_threshold",
            detail: "N must be positive".into(),
        });
    }
    // ½ − ½(1−δ)^{1/N} = −½·expm1(ln(1−δ)/N), exact for tiny δ.
    let arg = -0.5 * ((-delta).ln_1p() / n_clients as f64).exp_m1();
    erfc_inv(arg)
}

/// Smallest `C` with `overflow_probability ≤ δ`:
/// `√(2Nσ_g²)·erfc⁻¹(½ − ½(1−δ)^{1/N})`.
pub fn min_clip_threshold(n_clients: usize, sigma_g: f64, delta: f64) -> Result<f64> {
    if !(sigma_g.is_finite() && sigma_g > 0.0) {
        return Err(Error::Domain {
            function: "min_clip_threshold",
            detail: format!("sigma_g = {sigma_g} must be positive"),
        });
    }
    let z = normalized_threshold(n_clients, delta)?;
    Ok((2.0 * n_clients as f64 * sigma_g * sigma_g).sqrt() * z)
}

/// Like [`min_clip_threshold`] but accounting for the quantizer: each
/// uploaded value is `g + ε` with `Var ε ≤ Δ²/4 = C²/4^b`, so the aggregate
/// has per-client variance `σ_g² + C²/4^b`. Solving `C = K·√(σ_g² + C²/4^b)`
/// with `K = √(2N)·z` gives `C = Kσ_g / √(1 − K²/4^b)`; no threshold exists
/// when `K² ≥ 4^b`.
pub fn min_clip_threshold_quantized(
    n_clients: usize,
    sigma_g: f64,
    delta: f64,
    bits: u32,
) -> Result<f64> {
    let plain = min_clip_threshold(n_clients, sigma_g, delta)?;
    let k = plain / sigma_g;
    let levels_sq = 4f64.powi(bits as i32);
    let slack = 1.0 - k * k / levels_sq;
    if slack <= 0.0 {
        return Err(Error::Domain {
            function: "min_clip_threshold_quantized",
            detail: format!(
                "no clip threshold reaches delta = {delta} with N = {n_clients} at b = {bits}; quantization noise alone overflows"
            ),
        });
    }
    Ok(plain / slack.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    pub hits: u64,
    pub p_hat: f64,
    /// Binomial standard error `√(p̂(1−p̂)/trials)`.
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_counts(hits: u64, trials: u64) -> Self {
        let p_hat = hits as f64 / trials.max(1) as f64;
        Self {
            trials,
            hits,
            p_hat,
            stderr: (p_hat * (1.0 - p_hat) / trials.max(1) as f64).sqrt(),
        }
    }

    /// `|value − p̂| ≤ k·stderr`, with a floor of one count so that an
    /// all-zero or all-one estimate still admits values within `1/trials`.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        let tol = (k * self.stderr).max(1.0 / self.trials.max(1) as f64);
        (value - self.p_hat).abs() <= tol
    }
}

/// Monte Carlo estimate of `Pr[max_{j<dim} |Σ_i g_j^{(i)}| > C]` with every
/// client value sampled individually.
pub fn mc_overflow_estimate(
    model: &OverflowModel,
    dim: usize,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    if trials == 0 || dim == 0 {
        return Err(Error::Domain {
            function: "mc_overflow_estimate",
            detail: "trials and dim must be positive".into(),
        });
    }
    let normal =
        Normal::new(0.0, model.sigma_g).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..trials {
        let mut overflow = false;
        for _ in 0..dim {
            let sum: f64 = (0..model.n_clients).map(|_| normal.sample(&mut rng)).sum();
            overflow |= sum.abs() > model.clip;
        }
        hits += u64::from(overflow);
    }
    Ok(McEstimate::from_counts(hits, trials))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_client_substitution() {
        // erfc(x) = 0.25 at x = erfc_inv(0.25); C = σ√2·x
        let x = erfc_inv(0.25).unwrap();
        let m = OverflowModel::new(1, 0.3, 0.3 * 2f64.sqrt() * x).unwrap();
        let p = overflow_probability(&m);
        assert!((p.value - 0.5).abs() < 1e-12, "{}", p.value);
        assert!(!p.clamped);
    }

    #[test]
    fn huge_clip_gives_zero() {
        let m = OverflowModel::new(50, 0.01, 1e3).unwrap();
        assert_eq!(overflow_probability(&m).value, 0.0);
        assert_eq!(exact_overflow_probability(&m, 50), 0.0);
    }

    #[test]
    fn small_clip_is_clamped() {
        let m = OverflowModel::new(4, 1.0, 0.01).unwrap();
        let p = overflow_probability(&m);
        assert!(p.clamped);
        assert_eq!(p.value, 1.0);
    }

    #[test]
    fn monotone_in_clip() {
        let mut prev = 1.0;
        for i in 1..200 {
            let m = OverflowModel::new(10, 0.1, i as f64 * 0.01).unwrap();
            let p = overflow_probability(&m).value;
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn threshold_is_self_consistent() {
        for &(n, delta) in &[(1, 0.1), (10, 1e-3), (100, 1e-6), (7, 0.5)] {
            let c = min_clip_threshold(n, 0.01, delta).unwrap();
            let p = overflow_probability(&OverflowModel::new(n, 0.01, c).unwrap()).value;
            assert!(p <= delta * (1.0 + 1e-9), "N = {n}: {p} > {delta}");
            assert!(p >= delta * (1.0 - 1e-6), "N = {n}: {p} much below {delta}");
        }
    }

    #[test]
    fn threshold_monotonicity() {
        let mut prev = 0.0;
        for n in (1..=64).map(|k| 2 * k) {
            let c = min_clip_threshold(n, 0.01, 1e-6).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        let mut prev = 0.0;
        for delta in [0.5, 0.1, 1e-2, 1e-4, 1e-6, 1e-9] {
            let c = min_clip_threshold(16, 0.01, delta).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert!(min_clip_threshold(4, 0.01, 0.0).is_err());
        assert!(min_clip_threshold(4, 0.01, 1.0).is_err());
    }

    #[test]
    fn quantized_threshold() {
        let plain = min_clip_threshold(100, 0.01, 1e-6).unwrap();
        let mut prev = f64::INFINITY;
        for b in [6, 8, 10, 16] {
            let c = min_clip_threshold_quantized(100, 0.01, 1e-6, b).unwrap();
            assert!(c > plain && c < prev);
            // fixed point: C = K·√(σ² + C²/4^b)
            let k = plain / 0.01;
            let rhs = k * (1e-4 + c * c / 4f64.powi(b as i32)).sqrt();
            assert!((c - rhs).abs() < 1e-12 * c);
            prev = c;
        }
        assert!(min_clip_threshold_quantized(100, 0.01, 1e-6, 5).is_err());
    }

    #[test]
    fn mc_matches_exact_tail() {
        let m = OverflowModel::new(8, 0.05, 0.3).unwrap();
        let est = mc_overflow_estimate(&m, 8, 20_000, 3).unwrap();
        let exact = exact_overflow_probability(&m, 8);
        assert!(est.agrees_with(exact, 3.0), "{est:?} vs {exact}");
        let huge = OverflowModel::new(8, 0.05, 100.0).unwrap();
        assert_eq!(
            mc_overflow_estimate(&huge, 8, 10_000, 1).unwrap().p_hat,
            0.0
        );
    }
}
