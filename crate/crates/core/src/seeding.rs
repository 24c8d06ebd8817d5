//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed, with the
//! 64-bit stream id selecting an independent keystream. Rollout workers use
//! ids `0..workers`; the trainer's bookkeeping streams sit at the top of the
//! id space so they never collide with a worker.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream that draws training prompts.
pub const PROMPT_STREAM: u64 = u64::MAX;
/// Stream that shuffles responses into mini-batches.
pub const SHUFFLE_STREAM: u64 = u64::MAX - 1;
/// Stream used by evaluation.
pub const EVAL_STREAM: u64 = u64::MAX - 2;
/// Stream that draws evaluation prompt sets.
pub const EVAL_PROMPT_STREAM: u64 = u64::MAX - 3;

/// Generator for stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One stream per rollout worker.
pub fn seed_streams(seed: u64, workers: usize) -> Result<Vec<ChaCha8Rng>> {
    if workers == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    Ok((0..workers as u64).map(|i| stream(seed, i)).collect())
}
