//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed and a path of stream tags, so independent streams
//! never share state and results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `master` along `path`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    rng_from(derive_seed(master, path))
}

/// Stream tags, kept distinct so no two uses collide.
pub mod tag {
    pub const ANATOMY: u64 = 0xA1;
    pub const STYLE: u64 = 0x57;
    pub const NOISE: u64 = 0x4E;
    pub const INIT: u64 = 0x11;
    pub const SHUFFLE: u64 = 0x5F;
    pub const MASK: u64 = 0x3A;
    pub const EPS: u64 = 0xE5;
    pub const PROBE: u64 = 0x9B;
}
