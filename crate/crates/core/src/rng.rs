//! Seeded random streams.
//!
//! Every experiment seed fans out into independent ChaCha streams so that
//! arrivals and link states do not depend on how many draws a policy makes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Arrivals = 1,
    LinkStates = 2,
    Policy = 3,
    Init = 4,
}

/// Build the generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
