//! Deterministic random number generation.
//!
//! Algorithm (fixed): the 64-bit state is seeded by mixing `seed` and
//! `stream` through two rounds of splitmix64, then advanced with
//! xorshift64*. Identical (seed, stream, call sequence) therefore yields
//! identical outputs everywhere the same IEEE-754 f64 operations and libm
//! are in use. Substreams let callers derive independent generators per
//! sample / parameter / epoch without coordination.

/// splitmix64 mixing step (public domain reference constants).
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a byte string (FNV-1a), used to derive stream ids
/// from names like subject ids.
pub fn hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Combine several 64-bit values into one stream id.
pub fn mix_streams(parts: &[u64]) -> u64 {
    let mut state = 0x51ed_27e4_a3f9_c5u64;
    for &p in parts {
        state ^= p;
        state = splitmix64(&mut state);
    }
    state
}

#[derive(Debug, Clone)]
pub struct DeterministicRng {
    state: u64,
    /// Cached second normal from the Box-Muller pair.
    spare_normal: Option<f64>,
}

impl DeterministicRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut s = seed ^ 0x6a09_e667_f3bc_c908;
        let a = splitmix64(&mut s);
        let mut s2 = stream ^ a;
        let b = splitmix64(&mut s2);
        // xorshift64* cannot sit at state 0.
        let state = if b == 0 { 0x9e37_79b9_7f4a_7c15 } else { b };
        Self {
            state,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for the
        // small n used here.
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller; second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln() is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
