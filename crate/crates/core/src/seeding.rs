//! Deterministic stream keying: every random draw in the pipeline is keyed
//! by explicit integers so results never depend on platform RNGs or
//! iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of key parts into one 64-bit value.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x6a09_e667_f3bc_c909u64; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based stream keyed by the given parts; identical keys give
/// identical streams on every platform.
pub(crate) fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut state = mix(parts);
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Uniform value in [0, 1) from key parts, without constructing a stream.
pub(crate) fn unit_hash(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}
