//! Counter-keyed normal draws.
//!
//! Every standard normal is a pure function of `(seed, path, step)`: the
//! path selects a ChaCha stream and the step a fixed word offset in it, so
//! the value never depends on how paths are split across threads.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const WORDS_PER_STEP: u128 = 4;

/// Sequential normals for one path, starting at `step`.
pub struct PathNormals {
    rng: ChaCha8Rng,
}

impl PathNormals {
    pub fn new(seed: u64, path: u64, step: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        Self { rng }
    }

    /// Box–Muller, cosine branch; consumes exactly two `u64` words.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform on [0, 1); consumes two words to stay on the step lattice.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let _ = self.rng.next_u64();
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// The standard normal keyed by `(seed, path, step)`.
pub fn normal(seed: u64, path: u64, step: u64) -> f64 {
    PathNormals::new(seed, path, step).next_normal()
}
