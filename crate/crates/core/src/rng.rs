//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`], which is ChaCha8
//! (`rand_chacha::ChaCha8Rng`) seeded with `SeedableRng::seed_from_u64`. The
//! conversion from raw 64-bit words to floats is done here rather than through
//! a distribution crate so the mapping is fixed: [`unit_open`] keeps the top 52
//! bits of a word and centres them, giving a value in `(0, 1)` whose support is
//! symmetric about 1/2. Serialized ensembles record this identity.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type StreamRng = ChaCha8Rng;

/// Identity string stored in serialized ensembles.
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64/unit52-centred";

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

const TWO_POW_M52: f64 = 1.0 / (1u64 << 52) as f64;

/// Uniform on `(0, 1)`, symmetric about 1/2.
#[inline]
pub fn unit_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 12) as f64 + 0.5) * TWO_POW_M52
}

/// Uniform on `(-1, 1)`, exactly symmetric about 0.
#[inline]
pub fn symmetric_unit(rng: &mut impl RngCore) -> f64 {
    2.0 * unit_open(rng) - 1.0
}

#[inline]
pub fn sign(rng: &mut impl RngCore) -> f64 {
    if rng.next_u64() >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base) ^ index.wrapping_mul(0xD605_0B7A_1E2D_9C1B))
}
