//! Seeded feature hashing used by the local deterministic providers.

use crate::corpus::token_spans;
use crate::scalar::{normalize_in_place, Scalar};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of `bytes` under `seed`; identical on every platform.
pub fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    mix(fnv1a(seed, bytes))
}

/// Alphanumeric tokens of `text`, lowercased. Punctuation carries no features.
pub fn feature_tokens(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|r| &text[r])
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of lowercased tokens into `dim` buckets.
///
/// The result is unit-length, or all-zero when `text` has no alphanumeric
/// token.
pub fn hash_embed<T: Scalar>(text: &str, dim: usize, seed: u64) -> Vec<T> {
    assert!(dim > 0, "hash_embed dimension must be positive");
    let mut v = vec![T::zero(); dim];
    for tok in feature_tokens(text) {
        add_feature(&mut v, seed, tok.as_bytes());
    }
    normalize_in_place(&mut v);
    v
}

pub(crate) fn add_feature<T: Scalar>(v: &mut [T], seed: u64, bytes: &[u8]) {
    let h = stable_hash(seed, bytes);
    let idx = (h % v.len() as u64) as usize;
    if h >> 63 == 1 {
        v[idx] -= T::one();
    } else {
        v[idx] += T::one();
    }
}
