//! Bit-exact upload and broadcast messages.
//!
//! Upload header (30 bytes, little-endian):
//!
//! ```text
//! tag: u8 | round: u32 | client_id: u32 | count: u32 | b: u8 | C_t: f64 bits (u64) | seed_id: u64
//! ```
//!
//! The broadcast header is the same without `client_id` (26 bytes). `count`
//! is the number of buckets for ciphertext payloads and the number of
//! values for plaintext payloads. Ciphertext payloads pack all
//! `count·m` residues at `⌈log2 q⌉` bits each.

use crate::error::{Error, Result};
use crate::lwe::{residue_bits, Ciphertext, LevelVector};
use crate::wire;

pub const UPLOAD_HEADER_BYTES: usize = 30;
pub const BROADCAST_HEADER_BYTES: usize = 26;

const TAG_UPLOAD_CT: u8 = 0x01;
const TAG_BROADCAST_CT: u8 = 0x02;
const TAG_UPLOAD_LEVELS: u8 = 0x03;
const TAG_BROADCAST_LEVELS: u8 = 0x04;
const TAG_UPLOAD_REALS: u8 = 0x05;
const TAG_BROADCAST_REALS: u8 = 0x06;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// One ciphertext per bucket.
    Ciphertexts(Vec<Ciphertext>),
    /// Plaintext quantization levels.
    Levels(LevelVector),
    /// Unquantized values.
    Reals(Vec<f64>),
}

impl Payload {
    fn count(&self) -> usize {
        match self {
            Payload::Ciphertexts(cts) => cts.len(),
            Payload::Levels(k) => k.len(),
            Payload::Reals(v) => v.len(),
        }
    }
}

/// What both sides need to know to size a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireContext {
    pub m: usize,
    pub q: u64,
    pub b: u32,
    pub n_clients: usize,
}

impl WireContext {
    /// Width of one uploaded level: `b + 1` bits, since clamped levels span
    /// the `2^b + 1` values `[-2^{b-1}, 2^{b-1}]`.
    pub fn upload_level_bits(&self) -> u32 {
        self.b + 1
    }

    /// Width of one summed level: `|Σk| ≤ N·2^{b-1}`.
    pub fn sum_level_bits(&self) -> u32 {
        let span = 2 * self.n_clients.max(1) as u64 * (1u64 << (self.b - 1));
        64 - span.leading_zeros()
    }

    pub fn payload_bytes(&self, payload: &Payload, broadcast: bool) -> usize {
        match payload {
            Payload::Ciphertexts(cts) => wire::packed_len(cts.len() * self.m, residue_bits(self.q)),
            Payload::Levels(k) => {
                let w = if broadcast {
                    self.sum_level_bits()
                } else {
                    self.upload_level_bits()
                };
                wire::packed_len(k.len(), w)
            }
            Payload::Reals(v) => 8 * v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadMessage {
    pub round: u32,
    pub client_id: u32,
    pub bits: u32,
    pub clip: f64,
    pub seed_id: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastMessage {
    pub round: u32,
    pub bits: u32,
    pub clip: f64,
    pub seed_id: u64,
    pub payload: Payload,
}

fn tag(payload: &Payload, broadcast: bool) -> u8 {
    match (payload, broadcast) {
        (Payload::Ciphertexts(_), false) => TAG_UPLOAD_CT,
        (Payload::Ciphertexts(_), true) => TAG_BROADCAST_CT,
        (Payload::Levels(_), false) => TAG_UPLOAD_LEVELS,
        (Payload::Levels(_), true) => TAG_BROADCAST_LEVELS,
        (Payload::Reals(_), false) => TAG_UPLOAD_REALS,
        (Payload::Reals(_), true) => TAG_BROADCAST_REALS,
    }
}

fn encode_payload(payload: &Payload, ctx: &WireContext, broadcast: bool, out: &mut Vec<u8>) {
    match payload {
        Payload::Ciphertexts(cts) => {
            let mut w = wire::BitWriter::new();
            let width = residue_bits(ctx.q);
            for ct in cts {
                for &x in ct.entries() {
                    w.write(x, width);
                }
            }
            out.extend_from_slice(&w.finish());
        }
        Payload::Levels(k) => {
            let (width, offset) = level_encoding(ctx, broadcast);
            let shifted: Vec<u64> = k.as_slice().iter().map(|&l| (l + offset) as u64).collect();
            out.extend_from_slice(&wire::pack(&shifted, width));
        }
        Payload::Reals(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

fn level_encoding(ctx: &WireContext, broadcast: bool) -> (u32, i64) {
    let half = 1i64 << (ctx.b - 1);
    if broadcast {
        (ctx.sum_level_bits(), ctx.n_clients.max(1) as i64 * half)
    } else {
        (ctx.upload_level_bits(), half)
    }
}

fn decode_payload(
    tag: u8,
    count: usize,
    body: &[u8],
    ctx: &WireContext,
    broadcast: bool,
) -> Result<Payload> {
    match tag {
        TAG_UPLOAD_CT | TAG_BROADCAST_CT => {
            let residues = wire::unpack(body, count * ctx.m, residue_bits(ctx.q))?;
            let cts = residues
                .chunks(ctx.m)
                .map(|chunk| Ciphertext::from_entries(chunk.to_vec(), ctx.q))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Malformed(format!("ciphertext residue: {e}")))?;
            Ok(Payload::Ciphertexts(cts))
        }
        TAG_UPLOAD_LEVELS | TAG_BROADCAST_LEVELS => {
            let (width, offset) = level_encoding(ctx, broadcast);
            let raw = wire::unpack(body, count, width)?;
            Ok(Payload::Levels(LevelVector::new(
                raw.into_iter().map(|x| x as i64 - offset).collect(),
            )))
        }
        TAG_UPLOAD_REALS | TAG_BROADCAST_REALS => {
            if body.len() != 8 * count {
                return Err(Error::Malformed(format!(
                    "expected {} payload bytes, got {}",
                    8 * count,
                    body.len()
                )));
            }
            Ok(Payload::Reals(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ))
        }
        other => Err(Error::Malformed(format!(
            "unknown message tag {other:#04x}"
        ))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
}

fn check_bits(bits: u8, ctx: &WireContext) -> Result<u32> {
    if u32::from(bits) != ctx.b {
        return Err(Error::Malformed(format!(
            "message carries b = {bits}, expected {}",
            ctx.b
        )));
    }
    Ok(u32::from(bits))
}

impl UploadMessage {
    pub fn encode(&self, ctx: &WireContext) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(UPLOAD_HEADER_BYTES + ctx.payload_bytes(&self.payload, false));
        out.push(tag(&self.payload, false));
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.count() as u32).to_le_bytes());
        out.push(self.bits as u8);
        out.extend_from_slice(&self.clip.to_bits().to_le_bytes());
        out.extend_from_slice(&self.seed_id.to_le_bytes());
        encode_payload(&self.payload, ctx, false, &mut out);
        out
    }

    pub fn decode(bytes: &[u8], ctx: &WireContext) -> Result<Self> {
        if bytes.len() < UPLOAD_HEADER_BYTES {
            return Err(Error::Malformed("upload shorter than its header".into()));
        }
        let mut c = Cursor { bytes, pos: 0 };
        let [t] = c.take::<1>();
        if !matches!(t, TAG_UPLOAD_CT | TAG_UPLOAD_LEVELS | TAG_UPLOAD_REALS) {
            return Err(Error::Malformed(format!("tag {t:#04x} is not an upload")));
        }
        let round = u32::from_le_bytes(c.take());
        let client_id = u32::from_le_bytes(c.take());
        let count = u32::from_le_bytes(c.take()) as usize;
        let [bits] = c.take::<1>();
        let clip = f64::from_bits(u64::from_le_bytes(c.take()));
        let seed_id = u64::from_le_bytes(c.take());
        Ok(Self {
            round,
            client_id,
            bits: check_bits(bits, ctx)?,
            clip,
            seed_id,
            payload: decode_payload(t, count, &bytes[UPLOAD_HEADER_BYTES..], ctx, false)?,
        })
    }
}

impl BroadcastMessage {
    pub fn encode(&self, ctx: &WireContext) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(BROADCAST_HEADER_BYTES + ctx.payload_bytes(&self.payload, true));
        out.push(tag(&self.payload, true));
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.count() as u32).to_le_bytes());
        out.push(self.bits as u8);
        out.extend_from_slice(&self.clip.to_bits().to_le_bytes());
        out.extend_from_slice(&self.seed_id.to_le_bytes());
        encode_payload(&self.payload, ctx, true, &mut out);
        out
    }

    pub fn decode(bytes: &[u8], ctx: &WireContext) -> Result<Self> {
        if bytes.len() < BROADCAST_HEADER_BYTES {
            return Err(Error::Malformed("broadcast shorter than its header".into()));
        }
        let mut c = Cursor { bytes, pos: 0 };
        let [t] = c.take::<1>();
        if !matches!(
            t,
            TAG_BROADCAST_CT | TAG_BROADCAST_LEVELS | TAG_BROADCAST_REALS
        ) {
            return Err(Error::Malformed(format!("tag {t:#04x} is not a broadcast")));
        }
        let round = u32::from_le_bytes(c.take());
        let count = u32::from_le_bytes(c.take()) as usize;
        let [bits] = c.take::<1>();
        let clip = f64::from_bits(u64::from_le_bytes(c.take()));
        let seed_id = u64::from_le_bytes(c.take());
        Ok(Self {
            round,
            bits: check_bits(bits, ctx)?,
            clip,
            seed_id,
            payload: decode_payload(t, count, &bytes[BROADCAST_HEADER_BYTES..], ctx, true)?,
        })
    }
}
