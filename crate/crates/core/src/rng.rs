//! Deterministic pseudo-random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood, 2014): a single 64-bit
//! state advanced by the golden-ratio increment `0x9E3779B97F4A7C15` and
//! finalised with the `mix64` variant-13 mixer. It is trivially portable, so
//! index sequences and synthetic datasets reproduce across platforms and
//! languages.
//!
//! Independent streams are derived with [`SplitMix64::stream`], which seeds a
//! fresh generator from `mix64(seed) ^ mix64(stream_id + GOLDEN)`.
//!
//! - uniform `f64` in `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! - standard normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`, one
//!   normal per pair of uniforms (no caching, so streams stay aligned)
//! - integer in `[0, n)`: Lemire-free modulo reduction of `next_u64`
//!   (bias is below 2^-40 for the sizes used here)

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// A generator for stream `id` under `seed`. Distinct ids give
    /// statistically independent sequences.
    pub fn stream(seed: u64, id: u64) -> Self {
        Self::new(mix64(seed) ^ mix64(id.wrapping_add(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher–Yates, iterating from the last position down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
