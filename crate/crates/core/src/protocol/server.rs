//! The aggregating server. It only ever sees upload messages.

use super::message::{BroadcastMessage, Payload, UploadMessage};
use crate::error::{Error, Result};
use crate::lwe::{add_ciphertexts, Ciphertext, LevelVector};

/// Holds the round counter, the public seed id and ciphertext-level state.
/// There is deliberately no place for keys or plaintext gradients.
#[derive(Debug, Clone)]
pub struct ServerState {
    round: u32,
    seed_id: u64,
    n_clients: usize,
    last_broadcast: Option<BroadcastMessage>,
}

impl ServerState {
    pub fn new(seed_id: u64, n_clients: usize) -> Self {
        Self {
            round: 0,
            seed_id,
            n_clients,
            last_broadcast: None,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn last_broadcast(&self) -> Option<&BroadcastMessage> {
        self.last_broadcast.as_ref()
    }

    /// Aggregates this round's uploads and advances the round counter.
    pub fn aggregate(&mut self, msgs: Vec<UploadMessage>) -> Result<BroadcastMessage> {
        for msg in &msgs {
            if msg.round != self.round {
                return Err(Error::Protocol(format!(
                    "client {} sent round {} during round {}",
                    msg.client_id, msg.round, self.round
                )));
            }
            if msg.seed_id != self.seed_id {
                return Err(Error::Protocol(format!(
                    "client {} uses a different matrix seed",
                    msg.client_id
                )));
            }
        }
        let out = server_aggregate(msgs, self.n_clients)?;
        self.round += 1;
        self.last_broadcast = Some(out.clone());
        Ok(out)
    }
}

/// Componentwise modular sum of ciphertexts (or plain sums for the
/// plaintext modes), processed in client-id order.
pub fn server_aggregate(
    mut msgs: Vec<UploadMessage>,
    n_clients: usize,
) -> Result<BroadcastMessage> {
    msgs.sort_by_key(|m| m.client_id);
    for (expected, msg) in msgs.iter().enumerate() {
        if msg.client_id as usize != expected {
            let detail = if (msg.client_id as usize) < expected {
                format!("duplicate upload from client {}", msg.client_id)
            } else {
                format!("missing upload from client {expected}")
            };
            return Err(Error::Protocol(detail));
        }
    }
    if msgs.len() != n_clients {
        return Err(Error::Protocol(format!(
            "missing upload from client {} ({} of {n_clients} received)",
            msgs.len(),
            msgs.len()
        )));
    }
    let first = &msgs[0];
    for msg in &msgs[1..] {
        let same_shape = match (&first.payload, &msg.payload) {
            (Payload::Ciphertexts(a), Payload::Ciphertexts(b)) => a.len() == b.len(),
            (Payload::Levels(a), Payload::Levels(b)) => a.len() == b.len(),
            (Payload::Reals(a), Payload::Reals(b)) => a.len() == b.len(),
            _ => false,
        };
        if msg.round != first.round
            || msg.bits != first.bits
            || msg.seed_id != first.seed_id
            || msg.clip.to_bits() != first.clip.to_bits()
            || !same_shape
        {
            return Err(Error::Protocol(format!(
                "header of client {} disagrees with client 0",
                msg.client_id
            )));
        }
    }
    let payload = match &first.payload {
        Payload::Ciphertexts(first_cts) => {
            let mut acc: Vec<Ciphertext> = first_cts.clone();
            for msg in &msgs[1..] {
                let Payload::Ciphertexts(cts) = &msg.payload else {
                    unreachable!()
                };
                for (a, c) in acc.iter_mut().zip(cts) {
                    *a = add_ciphertexts(a, c)?;
                }
            }
            Payload::Ciphertexts(acc)
        }
        Payload::Levels(first_k) => {
            let mut acc = first_k.as_slice().to_vec();
            for msg in &msgs[1..] {
                let Payload::Levels(k) = &msg.payload else {
                    unreachable!()
                };
                for (a, x) in acc.iter_mut().zip(k.as_slice()) {
                    *a += x;
                }
            }
            Payload::Levels(LevelVector::new(acc))
        }
        Payload::Reals(first_v) => {
            let mut acc = first_v.clone();
            for msg in &msgs[1..] {
                let Payload::Reals(v) = &msg.payload else {
                    unreachable!()
                };
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            Payload::Reals(acc)
        }
    };
    Ok(BroadcastMessage {
        round: first.round,
        bits: first.bits,
        clip: first.clip,
        seed_id: first.seed_id,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwe::{
        decrypt, encrypt, expand_public_matrix, sample_secret, LweParams, SecretKey, Seed,
    };
    use crate::protocol::message::WireContext;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn upload(client_id: u32, ct: Ciphertext) -> UploadMessage {
        UploadMessage {
            round: 0,
            client_id,
            bits: 6,
            clip: 1.0,
            seed_id: 7,
            payload: Payload::Ciphertexts(vec![ct]),
        }
    }

    fn setup(
        n_clients: usize,
    ) -> (
        LweParams,
        Vec<SecretKey>,
        Vec<LevelVector>,
        Vec<UploadMessage>,
    ) {
        let p = LweParams::new(32, 16, 65536, 6).unwrap();
        let a = expand_public_matrix(&Seed::from_u64(7), &p).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(n_clients as u64);
        let keys: Vec<_> = (0..n_clients)
            .map(|_| sample_secret(&mut rng, &p))
            .collect();
        let levels: Vec<_> = (0..n_clients)
            .map(|_| LevelVector::new((0..16).map(|_| rng.random_range(-3..=3)).collect()))
            .collect();
        let msgs = keys
            .iter()
            .zip(&levels)
            .enumerate()
            .map(|(i, (s, k))| upload(i as u32, encrypt(&p, &a, s, k).unwrap()))
            .collect();
        (p, keys, levels, msgs)
    }

    #[test]
    fn single_upload_passes_through() {
        let (_, _, _, msgs) = setup(1);
        let Payload::Ciphertexts(expected) = msgs[0].payload.clone() else {
            unreachable!()
        };
        let out = server_aggregate(msgs, 1).unwrap();
        assert_eq!(out.payload, Payload::Ciphertexts(expected));
    }

    #[test]
    fn order_independent_bytes() {
        let (p, _, _, msgs) = setup(5);
        let ctx = WireContext {
            m: p.m(),
            q: p.q(),
            b: p.b(),
            n_clients: 5,
        };
        let forward = server_aggregate(msgs.clone(), 5).unwrap().encode(&ctx);
        let mut shuffled = msgs;
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(server_aggregate(shuffled, 5).unwrap().encode(&ctx), forward);
    }

    #[test]
    fn decrypted_broadcast_is_the_level_sum() {
        let (p, keys, levels, msgs) = setup(6);
        let a = expand_public_matrix(&Seed::from_u64(7), &p).unwrap();
        let s_sum = keys
            .iter()
            .fold(SecretKey::zero(p.n()), |acc, k| acc.add(k, p.q()).unwrap());
        let out = server_aggregate(msgs, 6).unwrap();
        let Payload::Ciphertexts(cts) = out.payload else {
            unreachable!()
        };
        let got = decrypt(&p, &a, &s_sum, &cts[0]).unwrap();
        let want: Vec<i64> = (0..16)
            .map(|j| levels.iter().map(|k| k.as_slice()[j]).sum())
            .collect();
        assert_eq!(got.as_slice(), want.as_slice());
    }

    #[test]
    fn missing_duplicate_and_mismatched() {
        let (_, _, _, mut msgs) = setup(3);
        assert!(server_aggregate(msgs[..2].to_vec(), 3).is_err());
        let mut dup = msgs.clone();
        dup[2].client_id = 1;
        assert!(server_aggregate(dup, 3).is_err());
        msgs[1].bits = 8;
        assert!(server_aggregate(msgs.clone(), 3).is_err());
        msgs[1].bits = 6;
        msgs[2].clip = 2.0;
        assert!(server_aggregate(msgs, 3).is_err());
    }

    #[test]
    fn state_checks_round_and_seed() {
        let (_, _, _, msgs) = setup(2);
        let mut server = ServerState::new(8, 2);
        assert!(server.aggregate(msgs.clone()).is_err());
        let mut server = ServerState::new(7, 2);
        server.aggregate(msgs.clone()).unwrap();
        assert_eq!(server.round(), 1);
        assert!(server.aggregate(msgs).is_err());
    }
}
