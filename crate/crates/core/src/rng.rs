//! Deterministic random-number streams.
//!
//! Every consumer of randomness derives its own generator from the run seed and a
//! tag path, so results never depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Paths like `[REPETITION, r, ENKF]` identify one consumer.
pub mod tag {
    pub const TWIN: u64 = 0x7477_696e;
    pub const RL: u64 = 0x726c;
    pub const ENKF: u64 = 0x656e_6b66;
    pub const WORKER: u64 = 0x776f_726b;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const INIT: u64 = 0x696e_6974;
    pub const MEMBER: u64 = 0x6d65_6d62;
    pub const REPETITION: u64 = 0x7265_7065;
    pub const UPDATE: u64 = 0x7570_6474;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag path into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
