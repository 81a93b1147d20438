//! Deterministic seed derivation.
//!
//! All randomness in a run flows from a single 64-bit seed. Independent
//! streams (per scene, per expert, per epoch, ...) use sub-seeds derived as
//!
//! ```text
//! sub_seed = splitmix64(seed XOR fnv1a64(purpose))
//! ```
//!
//! where `purpose` is a short label such as `"scene/7"` or
//! `"init/expert/2"`. The scheme is order-independent: adding a new purpose
//! never perturbs existing streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for `purpose` from a run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(purpose.as_bytes()))
}

/// Deterministic stream keyed by `(seed, purpose)`.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}
