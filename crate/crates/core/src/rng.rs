//! Seed derivation. Every random consumer gets its own ChaCha stream keyed by
//! `(seed, index)`, so results never depend on thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// Purpose tags, so that dataset generation and test-set sampling under the
// same master seed never share a stream.
pub(crate) const TAG_TEST_SET: u64 = 0x7465_7374;
pub(crate) const TAG_CLASS: u64 = 0x636c_6173;
pub(crate) const TAG_DATA: u64 = 0x6461_7461;
