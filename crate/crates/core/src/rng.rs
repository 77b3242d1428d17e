//! Seeded random streams.
//!
//! Every stochastic operation draws from a ChaCha8 generator keyed by
//! `(seed, stream)`. Distinct streams of the same seed are independent, so a
//! consumer that draws a variable number of values (Gaussian noise) never
//! shifts the values another consumer sees. ChaCha output is specified
//! independently of the platform, which makes runs bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stream identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// GARNET rewards and transition tables.
    Instance = 0,
    /// Critic feature patterns.
    Features = 1,
    /// Action selection by the actor.
    Actions = 2,
    /// Next-state draws of the environment.
    Transitions = 3,
    /// Gaussian observation noise on rewards.
    RewardNoise = 4,
    /// Random probes used by the verification suite.
    Probe = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// The three streams consumed while an agent interacts with an environment.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub actions: ChaCha8Rng,
    pub transitions: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            actions: stream_rng(seed, Stream::Actions),
            transitions: stream_rng(seed, Stream::Transitions),
            noise: stream_rng(seed, Stream::RewardNoise),
        }
    }
}
