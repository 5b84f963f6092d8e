//! Fixed-point encoding, pairwise masking and masked summation.
//!
//! Real-valued weights are encoded into the 64-bit word ring with `F`
//! fractional bits. Every pair of clients `(i, j)` with `i < j` shares a mask
//! vector for the current iteration; the lower index adds it and the higher
//! index subtracts it, so all masks cancel in the server's wrapping sum.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::group_crypto::{expand_masks, MaskChainState, SharedKey};

/// Client index in the protocol roster (`0..n`).
pub type ClientId = u32;

/// Default number of fractional bits.
pub const DEFAULT_FRACTIONAL_BITS: u32 = 24;

/// Header size of an encoded [`MaskedVector`].
pub const MASKED_VECTOR_HEADER_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("fractional bits must be in 1..40, got {0}")]
    FractionalBits(u32),

    #[error("value {value} at index {index} exceeds the encodable magnitude {bound}")]
    Overflow { index: usize, value: f64, bound: f64 },

    #[error("aggregate headroom exceeded: {needed} >= {bound} (n={n})")]
    Headroom { needed: f64, bound: f64, n: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregationError {
    #[error("client {0} is not covered by the pair assignment")]
    NotCovered(ClientId),

    #[error("pair ({0}, {1}) is invalid or assigned twice")]
    BadPair(ClientId, ClientId),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("expected {expected} masked vectors, got {got}")]
    WrongCount { expected: usize, got: usize },

    #[error("duplicate submission from client {0}")]
    Duplicate(ClientId),

    #[error("client {client} is outside the roster of {n}")]
    UnknownClient { client: ClientId, n: usize },

    #[error("mixed iterations in one aggregate ({0} and {1})")]
    MixedIterations(u32, u32),

    #[error("malformed masked vector: {0}")]
    Malformed(&'static str),
}

/// Fixed-point codec over the ring of 64-bit words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    fractional_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            fractional_bits: DEFAULT_FRACTIONAL_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(fractional_bits: u32) -> Result<Self, CodecError> {
        if fractional_bits == 0 || fractional_bits >= 40 {
            return Err(CodecError::FractionalBits(fractional_bits));
        }
        Ok(FixedPointCodec { fractional_bits })
    }

    pub fn fractional_bits(&self) -> u32 {
        self.fractional_bits
    }

    /// `2^F`.
    pub fn scale(&self) -> f64 {
        (1u64 << self.fractional_bits) as f64
    }

    /// Largest encodable magnitude, `B = 2^64 / (2 * 2^F)`.
    pub fn bound(&self) -> f64 {
        (1u64 << (63 - self.fractional_bits)) as f64
    }

    /// Worst-case decode error of a single encoded value.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode_value(&self, value: f64) -> Option<u64> {
        if !value.is_finite() || value.abs() >= self.bound() {
            return None;
        }
        Some((value * self.scale()).round() as i64 as u64)
    }

    /// `round(w_k * 2^F) mod 2^64` for every element.
    pub fn encode(&self, w: &[f64]) -> Result<Vec<u64>, CodecError> {
        w.iter()
            .enumerate()
            .map(|(index, &value)| {
                self.encode_value(value).ok_or(CodecError::Overflow {
                    index,
                    value,
                    bound: self.bound(),
                })
            })
            .collect()
    }

    /// Center-lifts a word into `[-2^63, 2^63)` and rescales.
    pub fn decode_word(&self, word: u64) -> f64 {
        word as i64 as f64 / self.scale()
    }

    /// Decodes a wrapping sum of `n` encoded values into their real average.
    ///
    /// Correct only while the true signed sum stays within `(-2^63, 2^63)`;
    /// [`check_headroom`] enforces that at startup.
    pub fn decode_sum(&self, total: u64, n: usize) -> f64 {
        self.decode_word(total) / n as f64
    }
}

/// Rejects configurations whose aggregate could wrap around the ring.
///
/// `noise_scale` is the Laplace scale `b`; its `1 - 1e-12` quantile is
/// `b * ln(0.5e12)`.
pub fn check_headroom(
    codec: &FixedPointCodec,
    n: usize,
    max_abs_weight: f64,
    noise_scale: Option<f64>,
) -> Result<(), CodecError> {
    let noise_bound = noise_scale.map_or(0.0, |b| b * (0.5e12f64).ln());
    let needed = n as f64 * (max_abs_weight + noise_bound);
    let bound = codec.bound();
    if !(needed < bound) {
        return Err(CodecError::Headroom { needed, bound, n });
    }
    Ok(())
}

/// Canonical `(low, high)` key for an unordered pair.
fn pair_key(a: ClientId, b: ClientId) -> (ClientId, ClientId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Pairwise generator chains, keyed by `(i, j)` with `i < j`.
///
/// A client agent holds an assignment containing only its own pairs; tests
/// and the analysis code may hold the global one.
#[derive(Debug, Clone, Default)]
pub struct PairAssignment {
    chains: BTreeMap<(ClientId, ClientId), MaskChainState>,
}

impl PairAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        a: ClientId,
        b: ClientId,
        key: &SharedKey,
    ) -> Result<(), AggregationError> {
        if a == b {
            return Err(AggregationError::BadPair(a, b));
        }
        let k = pair_key(a, b);
        if self.chains.contains_key(&k) {
            return Err(AggregationError::BadPair(k.0, k.1));
        }
        self.chains.insert(k, MaskChainState::for_pair(key, k.0, k.1));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ClientId, ClientId)> + '_ {
        self.chains.keys().copied()
    }

    pub fn chain(&self, a: ClientId, b: ClientId) -> Option<&MaskChainState> {
        self.chains.get(&pair_key(a, b))
    }

    /// Advances every chain once and expands each fresh key into `count`
    /// mask words.
    pub fn advance(&mut self, count: usize) -> IterationMasks {
        let masks = self
            .chains
            .iter_mut()
            .map(|(&k, chain)| {
                let r = chain.advance();
                (k, expand_masks(&r, count))
            })
            .collect();
        IterationMasks { masks }
    }
}

/// Expanded per-pair mask words for one iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IterationMasks {
    masks: BTreeMap<(ClientId, ClientId), Vec<u64>>,
}

impl IterationMasks {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the mask vector shared by `a` and `b`.
    pub fn set(&mut self, a: ClientId, b: ClientId, words: Vec<u64>) -> Result<(), AggregationError> {
        if a == b {
            return Err(AggregationError::BadPair(a, b));
        }
        self.masks.insert(pair_key(a, b), words);
        Ok(())
    }

    pub fn get(&self, a: ClientId, b: ClientId) -> Option<&[u64]> {
        self.masks.get(&pair_key(a, b)).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Net mask `client` applies: `+` for partners above it, `-` below.
    pub fn net_mask(&self, client: ClientId, len: usize) -> Result<Vec<u64>, AggregationError> {
        let mut net = vec![0u64; len];
        let mut covered = false;
        for (&(lo, hi), words) in &self.masks {
            let add = if lo == client {
                true
            } else if hi == client {
                false
            } else {
                continue;
            };
            covered = true;
            if words.len() != len {
                return Err(AggregationError::LengthMismatch {
                    expected: len,
                    got: words.len(),
                });
            }
            for (acc, &m) in net.iter_mut().zip(words) {
                *acc = if add {
                    acc.wrapping_add(m)
                } else {
                    acc.wrapping_sub(m)
                };
            }
        }
        if !covered && !self.masks.is_empty() {
            return Err(AggregationError::NotCovered(client));
        }
        Ok(net)
    }
}

/// The masked words `y_i` one client sends to the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVector {
    pub client_id: ClientId,
    pub iteration: u32,
    pub words: Vec<u64>,
}

impl MaskedVector {
    /// Little-endian layout: iteration (u32), client id (u32), word count
    /// (u32), then the words as u64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASKED_VECTOR_HEADER_LEN + 8 * self.words.len());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AggregationError> {
        if bytes.len() < MASKED_VECTOR_HEADER_LEN {
            return Err(AggregationError::Malformed("truncated header"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let iteration = u32_at(0);
        let client_id = u32_at(4);
        let count = u32_at(8) as usize;
        let body = &bytes[MASKED_VECTOR_HEADER_LEN..];
        if body.len() != count * 8 {
            return Err(AggregationError::Malformed("word count does not match body"));
        }
        let words = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(MaskedVector {
            client_id,
            iteration,
            words,
        })
    }
}

/// `y = encoded + noise + Σ_{j>i} r_ij − Σ_{k<i} r_ki (mod 2^64)`.
pub fn mask(
    masks: &IterationMasks,
    client: ClientId,
    iteration: u32,
    encoded: &[u64],
    noise_words: &[u64],
) -> Result<MaskedVector, AggregationError> {
    if noise_words.len() != encoded.len() {
        return Err(AggregationError::LengthMismatch {
            expected: encoded.len(),
            got: noise_words.len(),
        });
    }
    let net = masks.net_mask(client, encoded.len())?;
    let words = encoded
        .iter()
        .zip(noise_words)
        .zip(&net)
        .map(|((&e, &z), &m)| e.wrapping_add(z).wrapping_add(m))
        .collect();
    Ok(MaskedVector {
        client_id: client,
        iteration,
        words,
    })
}

/// Per-word wrapping sum of a complete round of submissions.
pub fn sum_masked(msgs: &[MaskedVector], n: usize) -> Result<Vec<u64>, AggregationError> {
    if msgs.len() != n {
        let mut seen = BTreeSet::new();
        for m in msgs {
            if !seen.insert(m.client_id) {
                return Err(AggregationError::Duplicate(m.client_id));
            }
        }
        return Err(AggregationError::WrongCount {
            expected: n,
            got: msgs.len(),
        });
    }
    let first = msgs.first().ok_or(AggregationError::WrongCount {
        expected: n,
        got: 0,
    })?;
    let len = first.words.len();
    let mut seen = BTreeSet::new();
    let mut total = vec![0u64; len];
    for m in msgs {
        if m.client_id as usize >= n {
            return Err(AggregationError::UnknownClient {
                client: m.client_id,
                n,
            });
        }
        if !seen.insert(m.client_id) {
            return Err(AggregationError::Duplicate(m.client_id));
        }
        if m.iteration != first.iteration {
            return Err(AggregationError::MixedIterations(first.iteration, m.iteration));
        }
        if m.words.len() != len {
            return Err(AggregationError::LengthMismatch {
                expected: len,
                got: m.words.len(),
            });
        }
        for (acc, &w) in total.iter_mut().zip(&m.words) {
            *acc = acc.wrapping_add(w);
        }
    }
    Ok(total)
}

/// Computes the shared model `W = decode(Σ y_i) / n`.
pub fn aggregate(
    msgs: &[MaskedVector],
    codec: &FixedPointCodec,
    n: usize,
) -> Result<Vec<f64>, AggregationError> {
    let total = sum_masked(msgs, n)?;
    Ok(total.iter().map(|&t| codec.decode_sum(t, n)).collect())
}
