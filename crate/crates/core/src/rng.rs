//! Seedable counter-based random number generator.
//!
//! Everything stochastic in this crate (weight init, dropout masks, data
//! generation, shuffles) draws from [`CounterRng`] so that results are
//! reproducible from a seed alone and independent substreams can be derived
//! for parallel generation.
//!
//! The algorithm is SplitMix64: draw `i` (1-based) of a generator with key
//! `k` is `mix64(k + i * 0x9E3779B97F4A7C15)` where `mix64` is the standard
//! SplitMix64 finalizer. The counter, not hidden state, advances between
//! draws, so draw `i` can be computed without drawing `0..i`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: a fixed key plus an incrementing counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Generator for `seed`, counter at zero. The key is `mix64(seed)` so
    /// that nearby seeds produce unrelated streams.
    pub fn new(seed: u64) -> Self {
        CounterRng { key: mix64(seed), counter: 0 }
    }

    /// Derives an independent substream. The child key is
    /// `mix64(key ^ mix64(id ^ 0xA5A5_A5A5_A5A5_A5A5))`; distinct ids give
    /// distinct streams regardless of how many draws the parent has made.
    pub fn stream(&self, id: u64) -> Self {
        CounterRng {
            key: mix64(self.key ^ mix64(id ^ 0xA5A5_A5A5_A5A5_A5A5)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` with 24 random bits.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform integer in `[0, n)` via the 128-bit multiply-shift reduction.
    /// `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. Consumes exactly two `u64` draws;
    /// the sine half of the pair is discarded.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform in `[-limit, limit)`.
    pub fn next_symmetric(&mut self, limit: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * limit
    }

    /// Seeded Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
