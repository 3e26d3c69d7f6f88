//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! single root seed plus a `(purpose, index)` pair. ChaCha is counter based,
//! so a stream can be reconstructed for any step without replaying earlier
//! draws, and two streams with different indices never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes get distinct keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Sampling,
    Shuffle,
    Dropout,
    Synthetic,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1D17,
            Purpose::Sampling => 0x5A3F,
            Purpose::Shuffle => 0x5AFF,
            Purpose::Dropout => 0xD409,
            Purpose::Synthetic => 0x5E7C,
            Purpose::Test => 0x7E57,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, purpose: Purpose, index: u64) -> Rng {
        let key = splitmix(self.seed ^ splitmix(purpose.tag()));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
