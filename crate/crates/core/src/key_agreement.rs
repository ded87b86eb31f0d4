//! N-of-N additive sharing of the per-round secret keys.
//!
//! Client `i` splits `s_i` into `N` shares that sum to `s_i mod q` and sends
//! share `j` to client `j`. Every client adds what it received into a partial
//! sum; the partial sums add up to `s_sum = Σ s_i`. No single share, and no
//! set of shares missing at least one from a given client, reveals anything
//! about that client's key. There is no threshold reconstruction: a missing
//! client stalls the round.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::lwe::{residue_bits, ResidueSampler, SecretKey};
use crate::wire;

pub type ClientId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShare {
    pub from_client: ClientId,
    pub to_client: ClientId,
    pub share: SecretKey,
}

/// What the key-sum run leaves behind. Raw keys never appear here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySumTranscript {
    pub round: u32,
    pub shares: Vec<KeyShare>,
    /// `partial_sums[j]` is the sum of the shares delivered to client `j`.
    pub partial_sums: Vec<SecretKey>,
    pub s_sum: SecretKey,
}

/// Splits `s` into `n_clients` additive shares: the first `N-1` uniform over
/// `Z_q^n`, the last `s - Σ others mod q`.
pub fn split_additive<R: RngCore + ?Sized>(
    s: &SecretKey,
    from_client: ClientId,
    n_clients: usize,
    q: u64,
    rng: &mut R,
) -> Result<Vec<KeyShare>> {
    if n_clients < 2 {
        return Err(Error::TooFew {
            what: "clients",
            min: 2,
            actual: n_clients,
        });
    }
    let sampler = ResidueSampler::new(q);
    let n = s.len();
    let mut last = s.entries().to_vec();
    let mut shares = Vec::with_capacity(n_clients);
    for to in 0..n_clients - 1 {
        let share: Vec<u64> = (0..n).map(|_| sampler.sample(rng)).collect();
        for (l, &x) in last.iter_mut().zip(&share) {
            *l = (*l + q - x) % q;
        }
        shares.push(KeyShare {
            from_client,
            to_client: to as ClientId,
            share: SecretKey::from_entries(share, q)?,
        });
    }
    shares.push(KeyShare {
        from_client,
        to_client: (n_clients - 1) as ClientId,
        share: SecretKey::from_entries(last, q)?,
    });
    Ok(shares)
}

/// Runs the key sum with in-process delivery.
pub fn run_key_sum<R: RngCore>(
    keys: &[SecretKey],
    q: u64,
    rngs: &mut [R],
    round: u32,
) -> Result<KeySumTranscript> {
    run_key_sum_with(keys, q, rngs, round, Ok)
}

/// Runs the key sum, passing every share through `deliver` (for example a
/// transport that serializes and accounts for it).
pub fn run_key_sum_with<R, F>(
    keys: &[SecretKey],
    q: u64,
    rngs: &mut [R],
    round: u32,
    mut deliver: F,
) -> Result<KeySumTranscript>
where
    R: RngCore,
    F: FnMut(KeyShare) -> Result<KeyShare>,
{
    let n_clients = keys.len();
    if n_clients < 2 {
        return Err(Error::TooFew {
            what: "clients",
            min: 2,
            actual: n_clients,
        });
    }
    if rngs.len() != n_clients {
        return Err(Error::DimensionMismatch {
            expected: n_clients,
            actual: rngs.len(),
        });
    }
    let n = keys[0].len();
    let mut partial_sums = vec![SecretKey::zero(n); n_clients];
    let mut transcript_shares = Vec::with_capacity(n_clients * n_clients);
    for (i, (key, rng)) in keys.iter().zip(rngs.iter_mut()).enumerate() {
        if key.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: key.len(),
            });
        }
        for share in split_additive(key, i as ClientId, n_clients, q, rng)? {
            let delivered = deliver(share)?;
            let to = delivered.to_client as usize;
            partial_sums[to] = partial_sums[to].add(&delivered.share, q)?;
            transcript_shares.push(delivered);
        }
    }
    let mut s_sum = SecretKey::zero(n);
    for partial in &partial_sums {
        s_sum = s_sum.add(partial, q)?;
    }
    Ok(KeySumTranscript {
        round,
        shares: transcript_shares,
        partial_sums,
        s_sum,
    })
}

/// Share message: `round: u32 LE | from: u32 LE | to: u32 LE` followed by the
/// `n` share residues packed at `ceil(log2 q)` bits.
pub const SHARE_HEADER_BYTES: usize = 12;

pub fn encode_share(share: &KeyShare, round: u32, q: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        SHARE_HEADER_BYTES + wire::packed_len(share.share.len(), residue_bits(q)),
    );
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&share.from_client.to_le_bytes());
    out.extend_from_slice(&share.to_client.to_le_bytes());
    out.extend_from_slice(&wire::pack(share.share.entries(), residue_bits(q)));
    out
}

/// Inverse of [`encode_share`]; returns the round and the share.
pub fn decode_share(bytes: &[u8], n: usize, q: u64) -> Result<(u32, KeyShare)> {
    if bytes.len() < SHARE_HEADER_BYTES {
        return Err(Error::Malformed(
            "share message shorter than its header".into(),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let entries = wire::unpack(&bytes[SHARE_HEADER_BYTES..], n, residue_bits(q))?;
    let share = SecretKey::from_entries(entries, q)
        .map_err(|e| Error::Malformed(format!("share residue out of range: {e}")))?;
    Ok((
        word(0),
        KeyShare {
            from_client: word(1),
            to_client: word(2),
            share,
        },
    ))
}
