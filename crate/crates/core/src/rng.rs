//! Deterministic random streams keyed by `(seed, purpose, a, b)`.
//!
//! Every random draw in the simulator comes from a stream derived here, so a
//! round can be replayed in isolation and parallel execution order never
//! changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sampling = 1,
    Channel = 2,
    LocalNoise = 3,
    Schedule = 4,
    Problem = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> SimRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(32));
    ChaCha8Rng::seed_from_u64(h)
}
