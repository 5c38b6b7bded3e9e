//! Deterministic RNG substreams keyed by `(seed, replica, purpose, index)`.
//!
//! Keys are mixed with SplitMix64 into a ChaCha8 seed; the index selects
//! the ChaCha stream, so every site or replica draws from its own
//! independent sequence regardless of thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is used for; keeps different consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialSite = 1,
    Dynamics = 2,
    InitialLaw = 3,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seed for a derived experiment (e.g. one lattice size of a sweep).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(tag.wrapping_add(0x5EED)))
}

pub fn substream(seed: u64, replica: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ replica) ^ (purpose as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
