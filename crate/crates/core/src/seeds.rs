//! Deterministic seed derivation, so every random stream is addressed by
//! (base seed, purpose, index) instead of by draw order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream identifiers for [`derive`].
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const PAIR: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN_BATCH: u64 = 4;
    pub const TRAIN_SAMPLE: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const MASK_PREVIEW: u64 = 7;
    pub const EVAL_DATA: u64 = 8;
    pub const LOSS_PROBE: u64 = 9;
}

pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93)) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive(base, stream, index))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
