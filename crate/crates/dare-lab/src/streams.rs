//! Counter-based RNG streams.
//!
//! Every random draw in the lab comes from a stream keyed by
//! (master seed, domain, step, prompt id, slot index). Streams are derived
//! with a splitmix-style mixer, so rollout generation can run in any order
//! (or in parallel) and still reproduce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is consumed for. Keeps draws in one phase from ever
/// aliasing draws in another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    WorldGen = 1,
    PolicyInit = 2,
    Rollout = 3,
    Reference = 4,
    EvalSet = 5,
    Sampler = 6,
    Bayes = 7,
    Entropy = 8,
    CurrentFr = 9,
    BoundCheck = 10,
    Drift = 11,
    EvalRollout = 12,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Independently seeded stream for (seed, domain, step, prompt, index).
pub fn stream(seed: u64, domain: Domain, step: u64, prompt: u64, index: u64) -> ChaCha8Rng {
    let key = mix(seed, &[domain as u64, step, prompt, index]);
    ChaCha8Rng::seed_from_u64(key)
}

/// Stream keyed by domain only (world generation, eval-set selection, ...).
pub fn root_stream(seed: u64, domain: Domain) -> ChaCha8Rng {
    stream(seed, domain, 0, 0, 0)
}
