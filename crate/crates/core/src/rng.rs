//! Seeded stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream named by a
//! `(seed, domain, a, b)` tuple. Streams never share state, so work can be
//! split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream namespaces. Two domains never collide for the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Embeddings,
    Population,
    KeySample,
    Planner,
    Feedback,
    Policy,
    Pairwise,
    Split,
    Training,
    Baseline,
    Catalog,
    Traffic,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Embeddings => 0x45_4d_42,
            Domain::Population => 0x50_4f_50,
            Domain::KeySample => 0x4b_45_59,
            Domain::Planner => 0x50_4c_4e,
            Domain::Feedback => 0x46_42_4b,
            Domain::Policy => 0x50_4f_4c,
            Domain::Pairwise => 0x50_41_49,
            Domain::Split => 0x53_50_4c,
            Domain::Training => 0x54_52_4e,
            Domain::Baseline => 0x42_41_53,
            Domain::Catalog => 0x43_41_54,
            Domain::Traffic => 0x54_52_46,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stream keyed by one index.
pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    stream2(seed, domain, index, 0)
}

/// A stream keyed by two indices. `a` selects the ChaCha key, `b` the
/// ChaCha stream id, so distinct `(a, b)` pairs never overlap.
pub fn stream2(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let key = mix64(mix64(seed ^ domain.tag().rotate_left(40)) ^ a);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(b);
    rng
}
