//! Seeded random streams.
//!
//! Every stochastic routine consumes a [`Rng`]. Named streams derived from one seed are
//! independent of each other, so adding draws to one stream never perturbs another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream `name` of the generator family selected by `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(fnv1a(name));
    r
}

/// Child generator whose state is a deterministic function of the parent's next output.
pub fn fork(parent: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(parent.next_u64())
}
