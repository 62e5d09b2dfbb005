//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by a mix of a base seed and integer coordinates, so results never
//! depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically mixes a seed with a list of coordinates.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, coords: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}

// Stream domains, so that e.g. the noise stream of step 3 never collides
// with the attack stream of step 3.
pub(crate) const DOMAIN_INIT: u64 = 1;
pub(crate) const DOMAIN_SHUFFLE: u64 = 2;
pub(crate) const DOMAIN_NOISE: u64 = 3;
pub(crate) const DOMAIN_ATTACK_INIT: u64 = 4;
pub(crate) const DOMAIN_TARGET: u64 = 5;
pub(crate) const DOMAIN_MIXUP: u64 = 6;
pub(crate) const DOMAIN_TRAIN_ATTACK: u64 = 7;
pub(crate) const DOMAIN_SUBSET: u64 = 8;
pub(crate) const DOMAIN_SYNTHETIC: u64 = 9;
