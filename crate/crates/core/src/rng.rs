//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] addressed by a
//! `(seed, domain, index)` triple. The domain separates independent purposes
//! (effective-field samples, Brownian increments, trial data, ...) and the
//! index is the Monte-Carlo sample or trial number, mapped onto ChaCha's
//! 2^64 independent streams. A worker therefore never shares a stream with
//! another worker, and the numbers a sample sees do not depend on how the
//! samples are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive child seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed) ^ tag.rotate_left(17))
}

/// The stream for sample/trial `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Source of per-sample streams for one Monte-Carlo pass.
///
/// Field draws (Gaussian-process paths, planted signal, label noise, initial
/// parameters) and Brownian increments use separate seeds so that diffusion
/// randomness can be changed without touching anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    pub field_seed: u64,
    pub noise_seed: u64,
}

pub mod domain {
    pub const FIELD: u64 = 0x0066_6965_6c64;
    pub const NOISE: u64 = 0x006e_6f69_7365;
    pub const R_PASS: u64 = 1;
    pub const THETA_PASS: u64 = 2;
    pub const PREDICT: u64 = 3;
    pub const TRIAL_DATA: u64 = 10;
    pub const TRIAL_DYNAMICS: u64 = 11;
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            field_seed: derive_seed(seed, domain::FIELD),
            noise_seed: derive_seed(seed, domain::NOISE),
        }
    }

    /// Same field streams, different Brownian streams.
    pub fn with_noise_seed(self, seed: u64) -> Self {
        Self {
            noise_seed: derive_seed(seed, domain::NOISE),
            ..self
        }
    }

    /// Child factory for a sub-purpose (a pass, an iteration, ...).
    pub fn child(self, tag: u64) -> Self {
        Self {
            field_seed: derive_seed(self.field_seed, tag),
            noise_seed: derive_seed(self.noise_seed, tag),
        }
    }

    pub fn field(&self, index: usize) -> ChaCha8Rng {
        stream(self.field_seed, index as u64)
    }

    pub fn noise(&self, index: usize) -> ChaCha8Rng {
        stream(self.noise_seed, index as u64)
    }
}
