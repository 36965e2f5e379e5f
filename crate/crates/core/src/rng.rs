//! Named random streams.
//!
//! Every consumer draws from `stream(seed, name)`: a ChaCha8 generator keyed
//! by the run seed, with its stream id set to the 64-bit FNV-1a hash of
//! `name`. Adding a consumer with a new name leaves all other streams
//! unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(fnv1a(name));
    r
}
