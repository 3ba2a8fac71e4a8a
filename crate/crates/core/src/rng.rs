//! Deterministic RNG streams keyed by a run seed plus a tag path, so each
//! (purpose, epoch, batch) consumer draws from its own independent stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SHUFFLE: u64 = 1;
pub const TAG_ATTACK: u64 = 2;
pub const TAG_AUGMENT: u64 = 3;
pub const TAG_SPLIT: u64 = 4;
pub const TAG_BLOBS: u64 = 5;
pub const TAG_EVAL: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = tags.iter().fold(0x6A09_E667_F3BC_C908u64, |acc, &t| splitmix(acc ^ t));
    rng.set_stream(key);
    rng
}
