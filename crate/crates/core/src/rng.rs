//! Labeled random streams derived from one master seed.
//!
//! Every stochastic component draws from its own ChaCha stream, keyed by a
//! fixed label and an index (client id, round, ...). Changing how much
//! randomness one component consumes never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Task = 1,
    Partition = 2,
    Init = 3,
    Generation = 4,
    Sampling = 5,
    LocalTrain = 6,
    Attack = 7,
    Projection = 8,
}

/// Returns the generator for `(seed, label, index)`. `index` must fit in 48 bits.
pub fn stream(seed: u64, label: Stream, index: u64) -> Rng {
    debug_assert!(index < (1 << 48));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 48) | index);
    rng
}

/// Stream index for per-(round, client) work.
pub fn round_client_index(round: usize, client: usize) -> u64 {
    ((round as u64) << 24) | client as u64
}
