//! Seedable random streams.
//!
//! All randomness in the crate (weight init, Gumbel noise, augmentation,
//! test inputs) flows through [`Rng`], a thin wrapper around xoshiro256++.
//! Seeding goes through SplitMix64, so a `u64` seed fixes the whole 256-bit
//! state and the stream is identical on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Derives an independent child stream. The parent advances by one draw,
    /// so successive calls yield distinct children.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    /// Child stream keyed by `tag` without advancing the parent.
    pub fn fork(&self, tag: u64) -> Rng {
        let mut probe = self.inner.clone();
        let base = probe.next_u64();
        Rng::new(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box-Muller (one value per call, the pair's twin is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with the given std, redrawn until it falls within two std of zero.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_deterministic() {
        let mut a = Rng::new(3);
        let mut b = Rng::new(3);
        let mut ca = a.split();
        let mut cb = b.split();
        assert_eq!(ca.next_u64(), cb.next_u64());
        assert_eq!(a.fork(5).next_u64(), b.fork(5).next_u64());
        let mut ca2 = a.split();
        assert_ne!(ca.next_u64(), ca2.next_u64());
        assert_ne!(a.fork(5).next_u64(), a.fork(6).next_u64());
    }

    #[test]
    fn uniform_bounds_and_moments() {
        let mut r = Rng::new(11);
        let n = 20000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = r.normal();
            sum += z;
            sq += z * z;
        }
        assert!((sum / n as f64).abs() < 0.05);
        assert!((sq / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn truncated_normal_respects_bound() {
        let mut r = Rng::new(1);
        for _ in 0..1000 {
            assert!(r.truncated_normal(0.02).abs() <= 0.04);
        }
    }
}
