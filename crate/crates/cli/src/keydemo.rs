use clap::Args;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use flag_core::key_agreement::{decode_share, encode_share, run_key_sum_with};
use flag_core::lwe::ResidueSampler;
use flag_core::{Error, SecretKey};

use crate::Failure;

#[derive(Debug, Args)]
pub struct KeydemoArgs {
    /// Number of clients (at least 2).
    #[arg(long = "N", default_value_t = 3)]
    pub clients: usize,
    /// Key length.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Modulus; any value in [2, 2^32].
    #[arg(long, default_value_t = 65536)]
    pub q: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn run(args: &KeydemoArgs) -> Result<Value, Failure> {
    if args.clients < 2 {
        return Err(Failure::usage(
            "N",
            format!("{} clients; key agreement needs at least 2", args.clients),
        ));
    }
    if args.n == 0 {
        return Err(Failure::usage("n", "key length must be positive"));
    }
    if !(2..=1u64 << 32).contains(&args.q) {
        return Err(Failure::usage("q", format!("{} outside [2, 2^32]", args.q)));
    }
    let q = args.q;
    let sampler = ResidueSampler::new(q);
    // stream 2i: client i's key, stream 2i+1: its shares
    let stream = |s: u64| {
        let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
        rng.set_stream(s);
        rng
    };
    let keys = (0..args.clients as u64)
        .map(|i| {
            let mut rng = stream(2 * i);
            SecretKey::from_entries((0..args.n).map(|_| sampler.sample(&mut rng)).collect(), q)
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(Failure::runtime)?;
    let mut rngs: Vec<ChaCha20Rng> = (0..args.clients as u64)
        .map(|i| stream(2 * i + 1))
        .collect();

    let mut share_bytes = 0usize;
    let mut messages = 0usize;
    let transcript = run_key_sum_with(&keys, q, &mut rngs, 0, |share| {
        if share.from_client == share.to_client {
            return Ok(share);
        }
        let bytes = encode_share(&share, 0, q);
        share_bytes += bytes.len();
        messages += 1;
        decode_share(&bytes, args.n, q).map(|(_, s)| s)
    })
    .map_err(Failure::runtime)?;

    let mut direct = vec![0u64; args.n];
    for k in &keys {
        for (d, &x) in direct.iter_mut().zip(k.entries()) {
            *d = (*d + x) % q;
        }
    }
    let verified = transcript.s_sum.entries() == direct.as_slice();
    let shares: Vec<Value> = transcript
        .shares
        .iter()
        .map(|s| json!({"from": s.from_client, "to": s.to_client, "share": s.share.entries()}))
        .collect();
    let output = json!({
        "N": args.clients,
        "n": args.n,
        "q": q,
        "seed": args.seed,
        "keys": keys.iter().map(SecretKey::entries).collect::<Vec<_>>(),
        "shares": shares,
        "partial_sums": transcript.partial_sums.iter().map(SecretKey::entries).collect::<Vec<_>>(),
        "s_sum": transcript.s_sum.entries(),
        "direct_sum": direct,
        "share_messages": messages,
        "share_bytes": share_bytes,
        "status": if verified { "VERIFIED" } else { "MISMATCH" },
    });
    if verified {
        Ok(output)
    } else {
        Err(Failure::runtime(Error::Protocol(format!(
            "key sum mismatch: {output}"
        ))))
    }
}
