//! Seed derivation. Every consumer of randomness gets its own ChaCha stream
//! so that, say, changing the number of epochs never perturbs weight init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_BASELINE: u64 = 3;
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_DROPOUT: u64 = 2 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_SHUFFLE | epoch)
}

pub fn dropout_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_DROPOUT | epoch)
}
