//! Counter-based seed derivation.
//!
//! Every random stream in the crate is addressed by a root seed plus a path
//! of integer tags (replicate, group, subject, purpose, ...). Streams are
//! independent of scheduling order, so any replicate can be regenerated in
//! isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Kept numeric so derived seeds stay stable across releases.
pub mod stream {
    pub const GENERATE: u64 = 1;
    pub const MISSINGNESS: u64 = 2;
    pub const IMPUTATION: u64 = 3;
    pub const WEIGHT_STARTS: u64 = 4;
    pub const REPLICATE: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with a path of tags into a child seed.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn rng_for(root: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(root, path))
}

/// FNV-1a, used to turn cell labels into stable tags.
pub fn label_tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
