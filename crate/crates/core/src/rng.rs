//! Named, independent random streams derived from one master seed.
//!
//! `stream(seed, "init", 0)` and `stream(seed, "sampling", 0)` never share
//! state, so adding draws to one phase leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic sub-seed for `(master, name, index)`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(master ^ fnv1a(name)) ^ splitmix(index.wrapping_add(0x5151)))
}

pub fn stream(master: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name, index))
}
