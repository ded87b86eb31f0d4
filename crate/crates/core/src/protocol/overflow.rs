//! Overflow instrumentation and the noisy-LWE baseline encryption.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lwe::{encrypt_with_error, Ciphertext, LevelVector, LweParams, PublicMatrix, SecretKey};

/// Number of coordinates where the decoded aggregate differs from the true
/// sum the simulator computed in the clear.
pub fn measure_overflow(decoded: &[i64], truth: &[i64]) -> usize {
    debug_assert_eq!(decoded.len(), truth.len());
    decoded.iter().zip(truth).filter(|(a, b)| a != b).count()
}

/// Where `x` lands after reduction into `(-q/2, q/2]`.
pub fn wrap_centered(x: i64, q: u64) -> i64 {
    let q = q as i64;
    let r = x.rem_euclid(q);
    if r <= q / 2 {
        r
    } else {
        r - q
    }
}

/// What exact decryption returns for a true level sum: the sum reduced
/// into `(-2^{b-1}, 2^{b-1}]`.
pub fn wrap_levels(sum: &[i64], b: u32) -> Vec<i64> {
    sum.iter().map(|&s| wrap_centered(s, 1u64 << b)).collect()
}

/// Per-coordinate error `round(N(0, σ_e²))`, ties away from zero.
pub fn sample_lwe_error<R: RngCore + ?Sized>(
    rng: &mut R,
    len: usize,
    sigma_e: f64,
) -> Result<Vec<i64>> {
    if !(sigma_e.is_finite() && sigma_e >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "sigma_e = {sigma_e} must be >= 0"
        )));
    }
    if sigma_e == 0.0 {
        return Ok(vec![0; len]);
    }
    let normal = Normal::new(0.0, sigma_e).map_err(|e| Error::InvalidParams(e.to_string()))?;
    Ok((0..len)
        .map(|_| normal.sample(rng).round() as i64)
        .collect())
}

/// `A·s + γ·k + e mod q` with `e` from [`sample_lwe_error`]. Returns the
/// error alongside the ciphertext so a simulator can track true sums.
pub fn baseline_lwe_encrypt<R: RngCore + ?Sized>(
    params: &LweParams,
    a: &PublicMatrix,
    s: &SecretKey,
    k: &LevelVector,
    sigma_e: f64,
    rng: &mut R,
) -> Result<(Ciphertext, Vec<i64>)> {
    let e = sample_lwe_error(rng, params.m(), sigma_e)?;
    Ok((encrypt_with_error(params, a, s, k, &e)?, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwe::{decrypt, encrypt, expand_public_matrix, sample_secret, Seed};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_client_never_overflows_except_the_aliased_minimum() {
        let b = 4;
        for k in -8..=8i64 {
            let wrapped = wrap_levels(&[k], b)[0];
            if k == -8 {
                // -2^{b-1}·γ = -q/2 ≡ +q/2
                assert_eq!(wrapped, 8);
            } else {
                assert_eq!(wrapped, k);
            }
        }
    }

    #[test]
    fn constructed_wraparound_is_counted() {
        let p = LweParams::new(16, 6, 1 << 12, 4).unwrap();
        let a = expand_public_matrix(&Seed::from_u64(1), &p).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s1 = sample_secret(&mut rng, &p);
        let s2 = sample_secret(&mut rng, &p);
        // coordinates 1 and 4 sum past 2^{b-1} = 8
        let k1 = LevelVector::new(vec![3, 8, -2, 0, -8, 4]);
        let k2 = LevelVector::new(vec![4, 1, 2, 0, -1, 4]);
        let ct = crate::lwe::add_ciphertexts(
            &encrypt(&p, &a, &s1, &k1).unwrap(),
            &encrypt(&p, &a, &s2, &k2).unwrap(),
        )
        .unwrap();
        let decoded = decrypt(&p, &a, &s1.add(&s2, p.q()).unwrap(), &ct).unwrap();
        let truth: Vec<i64> = k1
            .as_slice()
            .iter()
            .zip(k2.as_slice())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(decoded.as_slice(), wrap_levels(&truth, 4).as_slice());
        assert_eq!(measure_overflow(decoded.as_slice(), &truth), 2);
    }

    #[test]
    fn zero_sigma_matches_encrypt() {
        let p = LweParams::new(8, 4, 256, 3).unwrap();
        let a = expand_public_matrix(&Seed::from_u64(3), &p).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let s = sample_secret(&mut rng, &p);
        let k = LevelVector::new(vec![1, -2, 4, 0]);
        let (ct, e) = baseline_lwe_encrypt(&p, &a, &s, &k, 0.0, &mut rng).unwrap();
        assert_eq!(ct, encrypt(&p, &a, &s, &k).unwrap());
        assert_eq!(e, vec![0; 4]);
    }

    #[test]
    fn error_std_matches_sigma() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sigma = 3547.0;
        let e = sample_lwe_error(&mut rng, 100_000, sigma).unwrap();
        let n = e.len() as f64;
        let mean = e.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = e.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02);
    }
}
