//! Named, counter-addressed random streams.
//!
//! Every consumer of randomness asks for a `(seed, purpose, counter)` triple.
//! The purpose selects the ChaCha stream id and the counter selects a disjoint
//! window of the keystream, so the draws a given sample sees do not depend on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words reserved for each counter window (2^32 words = 16 GiB of keystream).
const WINDOW_WORDS: u128 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    BatchOrder = 2,
    RpSampling = 3,
    Noise = 4,
    World = 5,
    Logs = 6,
    Incidents = 7,
    Split = 8,
    Routing = 9,
    Bootstrap = 10,
    Holdout = 11,
}

/// Returns the generator for one counter window of a named stream.
pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng.set_word_pos(u128::from(counter) * WINDOW_WORDS);
    rng
}

/// Packs two counters into one. The high half must stay below 2^32.
pub fn counter2(hi: u64, lo: u64) -> u64 {
    debug_assert!(hi < (1 << 32) && lo < (1 << 32));
    (hi << 32) | lo
}
