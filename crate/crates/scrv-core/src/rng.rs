//! Seed-derived RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from the
//! single run seed plus a domain tag (and, where loading is per-item, an item
//! index). Streams are independent, so parallel batch loading and serial
//! loading consume identical randomness per item.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness domains split from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Parameter initialization.
    Init,
    /// Training pair/triplet index sampling.
    Sampler,
    /// Per-image augmentation and corrupted-file resampling; indexed per item.
    Augment,
    /// Fixed test-pair generation.
    TestPairs,
    /// Synthetic corpus style and stroke generation.
    Synth,
    /// Validation pair/triplet selection.
    Validation,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::Init => 1,
            StreamDomain::Sampler => 2,
            StreamDomain::Augment => 3,
            StreamDomain::TestPairs => 4,
            StreamDomain::Synth => 5,
            StreamDomain::Validation => 6,
        }
    }
}

/// RNG for `(seed, domain)`; use for domains that are consumed serially.
pub fn stream(seed: u64, domain: StreamDomain) -> ChaCha8Rng {
    stream_indexed(seed, domain, 0)
}

/// RNG for `(seed, domain, index)`. Item-indexed domains get one stream per
/// item so the draw sequence is independent of loading order.
pub fn stream_indexed(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // ChaCha streams are cheap: same key, disjoint counter spaces.
    rng.set_stream(domain.tag() << 56 | index);
    rng
}
