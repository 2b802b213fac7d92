//! Deterministic seed derivation.
//!
//! Every source of randomness in the toolkit is a `ChaCha8Rng` seeded from
//! an explicit `u64`. Sub-seeds (per cloud, per example, per epoch) are
//! derived here with a fixed mixing function so results never depend on
//! process-specific state such as hasher randomization.

/// SplitMix64 finalizer; a well-studied 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a base seed and a path of integers.
///
/// The same `(base, parts)` always yields the same result; distinct paths
/// yield independent-looking streams.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut acc = mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for &p in parts {
        acc = mix(acc ^ p.wrapping_mul(0xff51_afd7_ed55_8ccd).wrapping_add(1));
    }
    acc
}

/// Stable 64-bit FNV-1a hash of a string, for folding names into seeds.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
