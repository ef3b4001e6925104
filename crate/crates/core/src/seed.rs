//! Seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers
//! (base seed, sample id, epoch, ...). Mixing is SplitMix64 finalization
//! folded over the tuple, so streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and an ordered list of keys.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(base), |acc, &k| mix(acc ^ mix(k)))
}

pub fn rng(base: u64, keys: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(base, keys))
}

/// Stable 64-bit key for a string, used to key streams by dataset name.
pub fn key_of(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325_u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3)
    })
}

// Stream tags keep unrelated consumers of the same base seed apart.
pub(crate) const TAG_SYNTH: u64 = 0x5359_4e54;
pub(crate) const TAG_SPLIT: u64 = 0x5350_4c54;
pub(crate) const TAG_SUBSAMPLE: u64 = 0x5355_4253;
pub(crate) const TAG_AUGMENT: u64 = 0x4155_474d;
pub(crate) const TAG_INIT: u64 = 0x494e_4954;
pub(crate) const TAG_HEAD: u64 = 0x4845_4144;
pub(crate) const TAG_QUEUE: u64 = 0x5155_4555;
pub(crate) const TAG_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const TAG_BOOTSTRAP: u64 = 0x424f_4f54;
pub(crate) const TAG_ACTIVATIONS: u64 = 0x4143_5456;
pub(crate) const TAG_LIMITED: u64 = 0x4c49_4d49;
