//! Named, reproducible random streams.
//!
//! Every stochastic component draws from its own stream derived from the
//! session seed, so adding draws in one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies the consumer of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    SensorNoise = 1,
    Environment = 2,
    Operator = 3,
    Clustering = 4,
    Calibration = 5,
    Benchmark = 6,
}

/// Deterministic generator for `(seed, stream)`.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
