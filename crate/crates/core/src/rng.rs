//! Seeding scheme. Every run owns one 64-bit seed; each consumer of randomness
//! gets its own ChaCha8 stream keyed by `(seed, stream id)`, so adding draws to
//! one consumer never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Initial particle positions.
pub const STREAM_INIT: u64 = 0;
/// Langevin noise of the particle engine.
pub const STREAM_NOISE: u64 = 1;
/// Network parameter initialisation.
pub const STREAM_PARAMS: u64 = 2;
/// Real-data minibatches.
pub const STREAM_DATA: u64 = 3;
/// Generator latent draws and labels.
pub const STREAM_LATENT: u64 = 4;
/// Evaluation samples at checkpoints.
pub const STREAM_EVAL: u64 = 5;

pub fn stream(seed: u64, stream_id: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
