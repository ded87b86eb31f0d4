//! Client side of a round: local gradient, clip, quantize, encrypt, and
//! later decrypt the aggregate and update the model.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::bucket::Bucketing;
use super::config::Mode;
use super::message::{BroadcastMessage, Payload, UploadMessage};
use super::overflow::baseline_lwe_encrypt;
use crate::error::{Error, Result};
use crate::key_agreement::{split_additive, KeyShare};
use crate::lwe::{
    decrypt, decrypt_residues, encrypt, sample_secret, LevelVector, LweParams, PublicMatrix,
    SecretKey,
};
use crate::quantizer::{clip, dequantize, quantize, DitherSource, QuantConfig};
use crate::trainer::{momentum_step, LocalObjective};

// ChaCha stream ids carved out of each client's rng seed.
const STREAM_BATCH: u64 = 0;
const STREAM_KEYS: u64 = 1;
const STREAM_BASELINE_NOISE: u64 = 2;

/// Everything a client needs to know about the current round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub mode: Mode,
    pub params: &'a LweParams,
    /// `A_j` for every bucket; empty for plaintext modes.
    pub matrices: &'a [PublicMatrix],
    pub bucketing: Bucketing,
    pub seed_id: u64,
    /// Baseline LWE error std in residue units.
    pub sigma_e: f64,
    pub round: u32,
}

/// Simulation-only record of what a client encoded. Never sent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UploadTrace {
    pub levels: Option<LevelVector>,
    /// Baseline errors over the padded dimension.
    pub errors: Option<Vec<i64>>,
}

/// A client's decoding of the broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Dequantized (or plain) sum over clients.
    pub g_total: Vec<f64>,
    /// Decoded level sum, length `d`.
    pub levels: Option<Vec<i64>>,
    /// Centered residues of the baseline, length `d`.
    pub residues: Option<Vec<i64>>,
}

pub struct ClientState {
    id: u32,
    theta: Vec<f64>,
    velocity: Vec<f64>,
    momentum: f64,
    objective: Box<dyn LocalObjective>,
    key: Option<SecretKey>,
    s_sum: Option<SecretKey>,
    dither: DitherSource,
    batch_rng: ChaCha20Rng,
    key_rng: ChaCha20Rng,
    noise_rng: ChaCha20Rng,
    clip: f64,
}

impl std::fmt::Debug for ClientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientState")
            .field("id", &self.id)
            .field("dim", &self.theta.len())
            .field("clip", &self.clip)
            .finish_non_exhaustive()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl ClientState {
    pub fn new(
        id: u32,
        theta0: Vec<f64>,
        objective: Box<dyn LocalObjective>,
        rng_seed: u64,
        dither_seed: u64,
        clip0: f64,
        momentum: f64,
    ) -> Result<Self> {
        if theta0.len() != objective.dim() {
            return Err(Error::DimensionMismatch {
                expected: objective.dim(),
                actual: theta0.len(),
            });
        }
        if !(clip0.is_finite() && clip0 > 0.0) {
            return Err(Error::InvalidParams(format!("C_0 = {clip0} must be > 0")));
        }
        Ok(Self {
            id,
            velocity: vec![0.0; theta0.len()],
            theta: theta0,
            momentum,
            objective,
            key: None,
            s_sum: None,
            dither: DitherSource::seeded(dither_seed),
            batch_rng: stream(rng_seed, STREAM_BATCH),
            key_rng: stream(rng_seed, STREAM_KEYS),
            noise_rng: stream(rng_seed, STREAM_BASELINE_NOISE),
            clip: clip0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn set_clip(&mut self, c: f64) {
        debug_assert!(c > 0.0);
        self.clip = c;
    }

    pub fn objective(&self) -> &dyn LocalObjective {
        self.objective.as_ref()
    }

    /// Samples this round's secret key and splits it into shares for all
    /// `n_clients` clients (including one for itself).
    pub fn fresh_key_shares(
        &mut self,
        params: &LweParams,
        n_clients: usize,
    ) -> Result<Vec<KeyShare>> {
        let key = sample_secret(&mut self.key_rng, params);
        let shares = split_additive(&key, self.id, n_clients, params.q(), &mut self.key_rng)?;
        self.key = Some(key);
        Ok(shares)
    }

    pub fn set_key_sum(&mut self, s_sum: SecretKey) {
        self.s_sum = Some(s_sum);
    }

    fn quant_config(&self, params: &LweParams) -> Result<QuantConfig> {
        QuantConfig::new(self.clip, params.b())
    }

    /// Local gradient, momentum, then the mode's encoding.
    pub fn upload(&mut self, ctx: &RoundContext<'_>) -> Result<(UploadMessage, UploadTrace)> {
        let g = self
            .objective
            .stochastic_gradient(&self.theta, &mut self.batch_rng)?;
        let direction = momentum_step(&mut self.velocity, &g, self.momentum);
        if let Some(j) = direction.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        let mut trace = UploadTrace::default();
        let payload = if ctx.mode == Mode::Vanilla {
            Payload::Reals(direction)
        } else {
            let cfg = self.quant_config(ctx.params)?;
            let levels = quantize(&clip(&direction, self.clip)?, &cfg, &mut self.dither)?;
            let payload = match ctx.mode {
                Mode::QuantizedPlain => Payload::Levels(levels.clone()),
                Mode::Flag | Mode::LweBaseline => {
                    let key = self.key.as_ref().ok_or_else(|| {
                        Error::Protocol(format!(
                            "client {} has no key for round {}",
                            self.id, ctx.round
                        ))
                    })?;
                    let buckets = ctx.bucketing.bucketize(&levels)?;
                    if ctx.matrices.len() != buckets.len() {
                        return Err(Error::DimensionMismatch {
                            expected: buckets.len(),
                            actual: ctx.matrices.len(),
                        });
                    }
                    let mut cts = Vec::with_capacity(buckets.len());
                    let mut errors = Vec::new();
                    for (bucket, a) in buckets.iter().zip(ctx.matrices) {
                        if ctx.mode == Mode::Flag {
                            cts.push(encrypt(ctx.params, a, key, bucket)?);
                        } else {
                            let (ct, e) = baseline_lwe_encrypt(
                                ctx.params,
                                a,
                                key,
                                bucket,
                                ctx.sigma_e,
                                &mut self.noise_rng,
                            )?;
                            cts.push(ct);
                            errors.extend(e);
                        }
                    }
                    if ctx.mode == Mode::LweBaseline {
                        trace.errors = Some(errors);
                    }
                    Payload::Ciphertexts(cts)
                }
                Mode::Vanilla => unreachable!(),
            };
            trace.levels = Some(levels);
            payload
        };
        Ok((
            UploadMessage {
                round: ctx.round,
                client_id: self.id,
                bits: ctx.params.b(),
                clip: self.clip,
                seed_id: ctx.seed_id,
                payload,
            },
            trace,
        ))
    }

    /// Decrypts and dequantizes the broadcast with this round's `s_sum`.
    pub fn decode_broadcast(
        &self,
        bc: &BroadcastMessage,
        ctx: &RoundContext<'_>,
    ) -> Result<Aggregate> {
        let d = ctx.bucketing.dim();
        let cfg = QuantConfig::new(bc.clip, ctx.params.b())?;
        match (&bc.payload, ctx.mode) {
            (Payload::Reals(v), Mode::Vanilla) => Ok(Aggregate {
                g_total: v.clone(),
                levels: None,
                residues: None,
            }),
            (Payload::Levels(k), Mode::QuantizedPlain) => Ok(Aggregate {
                g_total: dequantize(k, &cfg),
                levels: Some(k.as_slice().to_vec()),
                residues: None,
            }),
            (Payload::Ciphertexts(cts), Mode::Flag | Mode::LweBaseline) => {
                let s_sum = self.s_sum.as_ref().ok_or_else(|| {
                    Error::Protocol(format!(
                        "client {} has no key sum for round {}",
                        self.id, bc.round
                    ))
                })?;
                if cts.len() != ctx.matrices.len() {
                    return Err(Error::DimensionMismatch {
                        expected: ctx.matrices.len(),
                        actual: cts.len(),
                    });
                }
                let mut residues = Vec::new();
                let mut buckets = Vec::with_capacity(cts.len());
                for (ct, a) in cts.iter().zip(ctx.matrices) {
                    if ctx.mode == Mode::Flag {
                        buckets.push(decrypt(ctx.params, a, s_sum, ct)?);
                    } else {
                        // Same rounding as `lwe::decrypt_rounded`, keeping the residues.
                        let r = decrypt_residues(ctx.params, a, s_sum, ct)?;
                        let step = ctx.params.gamma_step() as f64;
                        buckets.push(LevelVector::new(
                            r.iter()
                                .map(|&x| (x as f64 / step).round() as i64)
                                .collect(),
                        ));
                        residues.extend(r);
                    }
                }
                let levels = ctx.bucketing.debucketize(&buckets)?;
                residues.truncate(d);
                Ok(Aggregate {
                    g_total: dequantize(&levels, &cfg),
                    levels: Some(levels.into_inner()),
                    residues: (ctx.mode == Mode::LweBaseline).then_some(residues),
                })
            }
            _ => Err(Error::Protocol(format!(
                "broadcast payload does not match mode {:?}",
                ctx.mode
            ))),
        }
    }

    /// `θ ← θ − (η/N)·g_total`; drops this round's key material.
    pub fn apply_update(&mut self, agg: &Aggregate, eta: f64, n_clients: usize) -> Result<()> {
        if agg.g_total.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                actual: agg.g_total.len(),
            });
        }
        let factor = eta / n_clients as f64;
        for (t, g) in self.theta.iter_mut().zip(&agg.g_total) {
            *t -= factor * g;
        }
        self.key = None;
        self.s_sum = None;
        Ok(())
    }
}
