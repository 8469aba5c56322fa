//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a user
//! seed plus a stream identifier, so parallel work (RandomInit candidates,
//! averaged trajectories, image channels) is independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha20Rng;

/// Stream tags keep the identifier spaces of different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Measurement = 1,
    RandomInit = 2,
    Trajectory = 3,
    Operator = 4,
    Fixture = 5,
}

/// Returns the RNG for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: StreamTag, index: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 48) ^ index);
    rng
}

/// Fills a vector with standard normal draws.
pub fn normal_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
