//! Deterministic seed derivation.
//!
//! Every random decision in a run flows from a single root seed. Stages and
//! items derive their own seeds by hashing stable labels into the root, so a
//! partial rerun (say, recomputing one fitting-gap pair) sees exactly the
//! same stream as the full run.

/// FNV-1a over a byte string. Stable across platforms and releases, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates structured inputs.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from `root` for the given stage label.
pub fn derive(root: u64, stage: &str) -> u64 {
    splitmix64(root ^ fnv1a64(stage.as_bytes()))
}

/// Derives a child seed keyed by a stage label and a numeric item id.
pub fn derive_indexed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive(root, stage) ^ splitmix64(index))
}

/// Derives a child seed keyed by a stage label and an ordered id pair.
pub fn derive_pair(root: u64, stage: &str, a: u64, b: u64) -> u64 {
    splitmix64(derive_indexed(root, stage, a) ^ splitmix64(b.wrapping_add(0x5851_f42d_4c95_7f2d)))
}
