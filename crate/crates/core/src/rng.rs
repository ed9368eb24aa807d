//! Named random substreams derived from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENV: &str = "env";
pub const EXPLORATION: &str = "exploration";
pub const INIT: &str = "init";
pub const ROLES: &str = "roles";
pub const REPLAY: &str = "replay";
pub const EVAL: &str = "eval";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(fnv1a(name))) ^ splitmix64(index.wrapping_add(1)))
}

/// Independent generator for `(master, name, index)`.
pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, index))
}
