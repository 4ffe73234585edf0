//! Seed handling: one run seed, split into independent named streams.
//!
//! ChaCha streams guarantee the init / sampling / augmentation draws never
//! interleave, so e.g. turning augmentation off cannot shift the batch
//! sampling sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Embedding initialization.
    Init = 0,
    /// Batch and negative sampling.
    Sampling = 1,
    /// Augmentation draws (edge drops, dropout masks, noise).
    Augmentation = 2,
    /// Evaluation-side sampling (dispersion pairs).
    Eval = 3,
}

/// Deterministic RNG for one named stream of a run seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
