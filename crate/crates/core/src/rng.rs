//! Deterministic, splittable PRNG used for every source of randomness in
//! the crate (parameter init, corpus generation, window sampling).
//!
//! Backed by the counter-based ChaCha8 stream cipher so that state can be
//! captured and restored bit-exactly in checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expand_seed(mut state: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// Captured generator state, bit-exact for checkpoint round trips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct Prng {
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Prng { rng: ChaCha8Rng::from_seed(expand_seed(seed)) }
    }

    /// Independent generator keyed by `(seed, label)`. Generators with
    /// distinct labels are statistically independent; the mapping is pure.
    pub fn derive(seed: u64, label: u64) -> Self {
        let mut state = label.wrapping_add(1);
        let mixed = seed ^ splitmix64(&mut state);
        Prng { rng: ChaCha8Rng::from_seed(expand_seed(mixed)) }
    }

    /// Split off a child generator. The child is independent of all draws
    /// made from `self` afterwards; splitting consumes one draw.
    pub fn split(&mut self) -> Prng {
        let a = self.next_u64();
        let b = self.next_u64();
        let mut state = a;
        let mixed = b ^ splitmix64(&mut state);
        Prng { rng: ChaCha8Rng::from_seed(expand_seed(mixed)) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn state(&self) -> PrngState {
        PrngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: &PrngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Prng { rng }
    }
}
