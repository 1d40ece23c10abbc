//! Deterministic, splittable randomness.
//!
//! All randomness in a run flows from one root seed. Child generators are
//! derived by name (or index) via a counter-based generator with explicit
//! stream selection, so adding a consumer never perturbs the draws seen by
//! existing consumers, and identical seeds give bitwise-identical streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// FNV-1a, used to map stream names onto stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent child generator identified by a stable name.
    pub fn stream(&self, name: &str) -> Rng {
        let h = fnv1a(name.as_bytes());
        let key = splitmix(self.key ^ h);
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(h);
        Rng { key, inner }
    }

    /// Independent child generator identified by an index.
    pub fn substream(&self, idx: u64) -> Rng {
        let key = splitmix(self.key ^ splitmix(idx));
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(idx);
        Rng { key, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(self.normal())).collect();
        Tensor::from_vec(shape, data).expect("shape/product agree by construction")
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(self.uniform_in(lo, hi))).collect();
        Tensor::from_vec(shape, data).expect("shape/product agree by construction")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = Rng::new(42).stream("weights");
        let mut b = Rng::new(42).stream("weights");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta: Tensor<f64> = Rng::new(7).stream("x").normal_tensor(&[32]);
        let tb: Tensor<f64> = Rng::new(7).stream("x").normal_tensor(&[32]);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_names_and_indices_decorrelate() {
        let root = Rng::new(1);
        let a = root.stream("a").next_u64();
        let b = root.stream("b").next_u64();
        assert_ne!(a, b);
        let s0 = root.substream(0).next_u64();
        let s1 = root.substream(1).next_u64();
        assert_ne!(s0, s1);
        // Drawing from one stream must not advance another.
        let mut x = root.stream("x");
        let first = x.next_u64();
        let mut y = root.stream("y");
        let _ = y.next_u64();
        let mut x2 = root.stream("x");
        assert_eq!(first, x2.next_u64());
    }

    #[test]
    fn shuffle_is_deterministic_and_a_permutation() {
        let mut v1: Vec<usize> = (0..50).collect();
        let mut v2: Vec<usize> = (0..50).collect();
        Rng::new(3).stream("s").shuffle(&mut v1);
        Rng::new(3).stream("s").shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut sorted = v1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v1, (0..50).collect::<Vec<_>>(), "50 elements should not shuffle to identity");
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Rng::new(11).stream("n");
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = r.normal();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
