//! Reproducible randomness.
//!
//! Every random draw in the crate descends from one 64-bit seed. A
//! [`SeedStream`] is split into independent children by hashing a label or an
//! index into the parent state with SplitMix64; draws come from a ChaCha8
//! generator keyed by the stream value, so the same (seed, path) always gives
//! the same numbers regardless of call order elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(&self) -> u64 {
        self.0
    }

    /// Child stream keyed by a label.
    pub fn derive(&self, label: &str) -> Self {
        // FNV-1a over the label, then mixed with the parent.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self(splitmix64(self.0 ^ splitmix64(h)))
    }

    /// Child stream keyed by a counter.
    pub fn index(&self, i: u64) -> Self {
        Self(splitmix64(splitmix64(self.0) ^ i.wrapping_mul(0xD1B5_4A32_D192_ED03)))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// `n` draws from `[0, 1)`.
    pub fn uniforms(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}
