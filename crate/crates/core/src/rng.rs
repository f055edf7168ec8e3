//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed and a purpose tag, so toggling one feature never shifts the random
//! numbers another feature sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SCHEDULE: u64 = 2;
pub const STREAM_STEP: u64 = 3;
pub const STREAM_FOLDS: u64 = 4;
pub const STREAM_SYNTH: u64 = 5;

pub fn stream(seed: u64, purpose: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}
