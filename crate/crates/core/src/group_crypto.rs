//! Diffie-Hellman key agreement over a cyclic group, key derivation,
//! and the double-expansion generator that refreshes pairwise randomness
//! every protocol iteration.
//!
//! Two parameter regimes exist. The toy group (`p = 23`, `g = 5`) is small
//! enough to enumerate in tests; 5 is a primitive root, so the toy group is
//! all of `Z_23^*` with order `q = 22`. The production group is the
//! 2048-bit MODP group from RFC 3526 (group 14), whose generator 2 spans the
//! subgroup of order `q = (p - 1) / 2`.
//!
//! `lambda` sets the width of every derived key. The toy group still derives
//! full-width keys so the generator chain behaves realistically in tests.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Smallest key width accepted for the toy group.
pub const TOY_MIN_LAMBDA: u32 = 8;
/// Largest key width accepted for the toy group.
pub const TOY_MAX_LAMBDA: u32 = 4096;
/// Key width of the production MODP group.
pub const PRODUCTION_LAMBDA: u32 = 2048;

const MODP_2048_HEX: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
83655D23DCA3AD961C62F356208552BB9ED529077096966D\
670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
15728E5A8AACAA68FFFFFFFFFFFFFFFF";

const KDF_DOMAIN: &[u8] = b"dpsa/kdf/v1";
const PRG_DOMAIN: &[u8] = b"dpsa/prg/v1";
const MASK_DOMAIN: &[u8] = b"dpsa/mask/v1";
const PAIR_DOMAIN: &[u8] = b"dpsa/pair/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported security parameter lambda={lambda} ({reason})")]
    UnsupportedLambda { lambda: u32, reason: &'static str },

    #[error("public element is not a member of the group")]
    NotInGroup,

    #[error("malformed group parameters: {0}")]
    Malformed(String),
}

/// Which parameter set a [`GroupParams`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Toy,
    Modp2048,
}

/// Cyclic subgroup of `Z_p^*` of order `q`, generated by `g`.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    kind: GroupKind,
    p: BigUint,
    q: BigUint,
    g: BigUint,
    lambda: u32,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("kind", &self.kind)
            .field("p_bits", &self.p.bits())
            .field("g", &self.g)
            .field("lambda", &self.lambda)
            .finish()
    }
}

/// Hex-string form of [`GroupParams`], as written to run manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub kind: GroupKind,
    pub p: String,
    pub q: String,
    pub g: String,
    pub lambda: u32,
}

impl GroupParams {
    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    /// Byte width of an encoded group element.
    fn element_width(&self) -> usize {
        ((self.p.bits() + 7) / 8) as usize
    }

    /// True when `x` lies in the subgroup generated by `g`.
    pub fn contains(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && x.modpow(&self.q, &self.p).is_one()
    }

    pub fn to_manifest(&self) -> GroupManifest {
        GroupManifest {
            kind: self.kind,
            p: self.p.to_str_radix(16),
            q: self.q.to_str_radix(16),
            g: self.g.to_str_radix(16),
            lambda: self.lambda,
        }
    }

    pub fn from_manifest(m: &GroupManifest) -> Result<Self, CryptoError> {
        let parse = |s: &str, what: &str| {
            BigUint::parse_bytes(s.as_bytes(), 16)
                .ok_or_else(|| CryptoError::Malformed(format!("{what} is not hex")))
        };
        let params = GroupParams {
            kind: m.kind,
            p: parse(&m.p, "p")?,
            q: parse(&m.q, "q")?,
            g: parse(&m.g, "g")?,
            lambda: m.lambda,
        };
        if m.lambda % 8 != 0 || m.lambda < TOY_MIN_LAMBDA {
            return Err(CryptoError::UnsupportedLambda {
                lambda: m.lambda,
                reason: "must be a multiple of 8 and at least 8",
            });
        }
        if !params.contains(&params.g) || params.g.is_one() {
            return Err(CryptoError::Malformed(
                "g does not generate the order-q subgroup".into(),
            ));
        }
        Ok(params)
    }
}

/// Returns the group for a security parameter.
///
/// `test_mode` selects the fixed toy group and accepts any multiple of 8 in
/// `[8, 4096]` as the key width. Otherwise only `lambda = 2048` is supported.
pub fn generate_group(lambda: u32, test_mode: bool) -> Result<GroupParams, CryptoError> {
    if test_mode {
        if lambda < TOY_MIN_LAMBDA {
            return Err(CryptoError::UnsupportedLambda {
                lambda,
                reason: "below the toy floor of 8 bits",
            });
        }
        if lambda > TOY_MAX_LAMBDA || lambda % 8 != 0 {
            return Err(CryptoError::UnsupportedLambda {
                lambda,
                reason: "toy key width must be a multiple of 8 up to 4096",
            });
        }
        return Ok(GroupParams {
            kind: GroupKind::Toy,
            p: BigUint::from(23u32),
            q: BigUint::from(22u32),
            g: BigUint::from(5u32),
            lambda,
        });
    }
    if lambda != PRODUCTION_LAMBDA {
        return Err(CryptoError::UnsupportedLambda {
            lambda,
            reason: "production mode supports only the 2048-bit MODP group",
        });
    }
    let p = BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("constant is valid hex");
    let q = (&p - 1u32) >> 1;
    Ok(GroupParams {
        kind: GroupKind::Modp2048,
        p,
        q,
        g: BigUint::from(2u32),
        lambda,
    })
}

/// A fixed-width bit string, stored big-endian with any unused trailing
/// bits of the final byte cleared.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KeyBits {
    bits: u32,
    bytes: Vec<u8>,
}

impl KeyBits {
    /// Keeps the first `bits` bits of `bytes`.
    pub fn from_bytes(bits: u32, bytes: &[u8]) -> Self {
        let len = ((bits + 7) / 8) as usize;
        assert!(bytes.len() >= len, "need {len} bytes for {bits} bits");
        let mut out = bytes[..len].to_vec();
        let spare = len as u32 * 8 - bits;
        if spare > 0 {
            let last = out.last_mut().expect("bits >= 1");
            *last &= 0xffu8 << spare;
        }
        KeyBits { bits, bytes: out }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }
}

impl fmt::Debug for KeyBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyBits({}b:{})", self.bits, self.to_hex())
    }
}

/// One Diffie-Hellman secret `a` and its public element `g^a mod p`.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    secret: BigUint,
    public: BigUint,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Builds the pair for a caller-chosen secret, reduced into `Z_q`.
    pub fn from_secret(params: &GroupParams, secret: BigUint) -> Self {
        let secret = secret % &params.q;
        let public = params.g.modpow(&secret, &params.p);
        KeyPair { secret, public }
    }

    pub fn secret(&self) -> &BigUint {
        &self.secret
    }

    pub fn public(&self) -> &BigUint {
        &self.public
    }
}

/// Draws a secret uniformly from `Z_q`.
pub fn keygen<R: RngCore + ?Sized>(params: &GroupParams, rng: &mut R) -> KeyPair {
    let secret = rng.gen_biguint_below(&params.q);
    KeyPair::from_secret(params, secret)
}

/// The pairwise key `r_{i,j}` both endpoints derive.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct SharedKey(pub KeyBits);

impl SharedKey {
    pub fn bits(&self) -> &KeyBits {
        &self.0
    }
}

/// Computes `kdf(their_public ^ my_secret mod p)`.
pub fn agree(
    params: &GroupParams,
    my_secret: &BigUint,
    their_public: &BigUint,
) -> Result<SharedKey, CryptoError> {
    if !params.contains(their_public) {
        return Err(CryptoError::NotInGroup);
    }
    let common = their_public.modpow(my_secret, &params.p);
    Ok(SharedKey(kdf(params, &common)))
}

/// SHA-256 in counter mode over the fixed-width element encoding, truncated
/// to `lambda` bits.
pub fn kdf(params: &GroupParams, element: &BigUint) -> KeyBits {
    let width = params.element_width();
    let raw = element.to_bytes_be();
    let mut encoded = vec![0u8; width.saturating_sub(raw.len())];
    encoded.extend_from_slice(&raw);

    let out_len = ((params.lambda + 7) / 8) as usize;
    let mut out = Vec::with_capacity(out_len + 32);
    let mut counter = 0u32;
    while out.len() < out_len {
        let mut h = Sha256::new();
        h.update(KDF_DOMAIN);
        h.update(counter.to_be_bytes());
        h.update(&encoded);
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    KeyBits::from_bytes(params.lambda, &out)
}

/// The double-expansion generator `G: {0,1}^λ → {0,1}^{2λ}`: a ChaCha20
/// stream keyed by a hash of the seed.
pub fn prg_expand(seed: &KeyBits) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(PRG_DOMAIN);
    h.update(seed.bits.to_be_bytes());
    h.update(&seed.bytes);
    let key: [u8; 32] = h.finalize().into();
    let mut stream = ChaCha20Rng::from_seed(key);
    let half = seed.bytes.len();
    let mut out = vec![0u8; 2 * half];
    stream.fill_bytes(&mut out);
    out
}

/// Per-pair generator chain. The initial seed is the pairwise key; every
/// advance splits `G(seed)` into the next iteration's key and the next seed.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MaskChainState {
    current: KeyBits,
    seed: KeyBits,
    iteration: u64,
}

impl MaskChainState {
    pub fn new(key: &SharedKey) -> Self {
        MaskChainState {
            current: key.0.clone(),
            seed: key.0.clone(),
            iteration: 0,
        }
    }

    /// Chain for the unordered pair `{a, b}`. The starting seed hashes the
    /// key together with both ids, so two pairs that happen to share a key
    /// (likely in the toy group) still draw unrelated masks.
    pub fn for_pair(key: &SharedKey, a: u32, b: u32) -> Self {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let bits = key.0.bits;
        let out_len = key.0.bytes.len();
        let mut out = Vec::with_capacity(out_len + 32);
        let mut counter = 0u32;
        while out.len() < out_len {
            let mut h = Sha256::new();
            h.update(PAIR_DOMAIN);
            h.update(counter.to_be_bytes());
            h.update(lo.to_be_bytes());
            h.update(hi.to_be_bytes());
            h.update(&key.0.bytes);
            out.extend_from_slice(&h.finalize());
            counter += 1;
        }
        let seed = KeyBits::from_bytes(bits, &out);
        MaskChainState {
            current: seed.clone(),
            seed,
            iteration: 0,
        }
    }

    pub fn current(&self) -> &KeyBits {
        &self.current
    }

    pub fn seed(&self) -> &KeyBits {
        &self.seed
    }

    /// Number of advances applied so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// In-place form of [`prg_advance`].
    pub fn advance(&mut self) -> KeyBits {
        let (r, next) = prg_advance(self);
        *self = next;
        r
    }
}

/// `(r', s) = G(s_prev)`; returns `r'` and the successor state.
pub fn prg_advance(state: &MaskChainState) -> (KeyBits, MaskChainState) {
    let bits = state.seed.bits;
    let half = state.seed.bytes.len();
    let expanded = prg_expand(&state.seed);
    let r = KeyBits::from_bytes(bits, &expanded[..half]);
    let s = KeyBits::from_bytes(bits, &expanded[half..]);
    let next = MaskChainState {
        current: r.clone(),
        seed: s,
        iteration: state.iteration + 1,
    };
    (r, next)
}

/// Expands one iteration key into `count` mask words, uniform over the
/// 64-bit word ring. Word `k` comes from block `k / 4` of SHA-256 in counter
/// mode.
pub fn expand_masks(r: &KeyBits, count: usize) -> Vec<u64> {
    let mut words = Vec::with_capacity(count);
    let mut block = 0u64;
    while words.len() < count {
        let mut h = Sha256::new();
        h.update(MASK_DOMAIN);
        h.update(r.bits.to_be_bytes());
        h.update(&r.bytes);
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(8) {
            if words.len() == count {
                break;
            }
            words.push(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        block += 1;
    }
    words
}

/// Uniform secret for tests and callers that need a raw scalar.
pub fn random_scalar<R: Rng + ?Sized>(params: &GroupParams, rng: &mut R) -> BigUint {
    rng.gen_biguint_below(&params.q)
}
