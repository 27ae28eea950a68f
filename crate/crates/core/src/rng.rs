//! Keyed random streams.
//!
//! Every stochastic draw in a run is taken from a stream derived from a
//! tuple of integers (run seed, stream tag, step, slot, index). Streams are
//! independent of the order in which they are created, which is what makes
//! results independent of the number of rollout workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream tags. Distinct tags keep e.g. evaluation sampling from ever
/// sharing a stream with training rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Suite = 1,
    Init = 2,
    Pretrain = 3,
    PrefixSelect = 4,
    Mixture = 5,
    Rollout = 6,
    Eval = 7,
    Sft = 8,
    Rejection = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single 64-bit seed.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A stream keyed by `(seed, tag, rest...)`.
pub fn stream(seed: u64, tag: Stream, rest: &[u64]) -> LabRng {
    let mut key = Vec::with_capacity(rest.len() + 2);
    key.push(seed);
    key.push(tag as u64);
    key.extend_from_slice(rest);
    LabRng::seed_from_u64(mix_key(&key))
}

/// A plain seeded stream, for callers that just want reproducibility.
pub fn seeded(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}
