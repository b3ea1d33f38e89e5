//! Counter-based seeding: every consumer derives an independent ChaCha
//! stream from `(seed, domain, index)`, so parallel generation and resumed
//! runs see identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Speaker = 1,
    Sentence = 2,
    Utterance = 3,
    Mixture = 4,
    Triplet = 5,
    Init = 6,
    Batch = 7,
    Validation = 8,
    Probe = 9,
    Scatter = 10,
    Eval = 11,
    Pretrain = 12,
}

pub fn derived_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ (domain as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
