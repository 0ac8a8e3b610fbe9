//! Seeded, counter-based random streams.
//!
//! A stream is identified by `(seed, stream id)` and positioned by a word
//! counter, so any draw sequence can be checkpointed and replayed. Independent
//! sub-streams are derived by tag without touching the parent's position.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `(tag, index)`; `self` is not advanced.
    pub fn derive(&self, tag: &str, index: u64) -> RngState {
        let stream = mix(self.stream ^ mix(tag_hash(tag) ^ mix(index)));
        Self::with_stream(self.seed, stream)
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(pos: RngPosition) -> Self {
        let mut s = Self::with_stream(pos.seed, pos.stream);
        s.rng.set_word_pos(pos.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
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

/// I.i.d. samples from `[lo, hi)`; `lo == hi` yields a constant matrix.
pub fn sample_uniform<T: Scalar>(
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    rng: &mut RngState,
) -> Result<Matrix<T>> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Argument(format!("non-finite bounds [{lo}, {hi})")));
    }
    if lo > hi {
        return Err(Error::Argument(format!("sample_uniform: lo {lo} > hi {hi}")));
    }
    if lo == hi {
        return Ok(Matrix::full(rows, cols, T::from_f64_lossy(lo)));
    }
    let lo_t = T::from_f64_lossy(lo);
    let hi_t = T::from_f64_lossy(hi);
    let data = (0..rows * cols)
        .map(|_| {
            let v = T::from_f64_lossy(lo + (hi - lo) * rng.next_f64());
            // rounding can land exactly on the open end
            if v >= hi_t {
                hi_t.step_down().max(lo_t)
            } else if v < lo_t {
                lo_t
            } else {
                v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// I.i.d. `N(0, std²)` samples.
pub fn sample_normal<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(std * rng.normal()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_does_not_advance_parent() {
        let mut a = RngState::new(7);
        let _child = a.derive("init", 3);
        let mut b = RngState::new(7);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn derived_streams_differ() {
        let root = RngState::new(7);
        let mut x = root.derive("init", 0);
        let mut y = root.derive("init", 1);
        let mut z = root.derive("noise", 0);
        let (a, b, c) = (x.next_u64(), y.next_u64(), z.next_u64());
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn restore_resumes_mid_stream() {
        let mut a = RngState::new(11).derive("data", 2);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = RngState::restore(a.position());
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let mut r = RngState::new(0);
        assert!(sample_uniform::<f64>(2, 2, 1.0, 0.0, &mut r).is_err());
    }
}
