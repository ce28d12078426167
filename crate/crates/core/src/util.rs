//! Small shared helpers.

/// FNV-1a 64-bit hash; stable across runs and platforms, unlike the
/// randomized std hasher. Used wherever a seed or cache key is derived
/// from a string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a per-item seed from a base seed and a string key.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut h = fnv1a64(key.as_bytes());
    h ^= base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}
