//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! one user seed, so training, noise and validation sets can be reproduced
//! independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Train = 1,
    Noise = 2,
    Valset = 3,
    Target = 4,
    Oracle = 5,
    Init = 6,
}

/// RNG for sub-stream `stream`, further split by `index` (chunk or worker id).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
