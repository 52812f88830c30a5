//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the 64-bit seed (expanded to
//! a 256-bit key with the standard `seed_from_u64` PCG32 expansion) with the
//! ChaCha stream word set to the 64-bit stream id. Equal `(seed, stream)`
//! pairs yield bit-equal draw sequences on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scale of a zero-mean Laplace variable with unit variance.
pub const UNIT_LAPLACE_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream for `label`. Children of one parent with distinct labels
    /// have distinct stream ids; the parent's own position is not consumed.
    pub fn split(&self, label: u64) -> SeededRng {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        SeededRng::with_stream(self.seed, stream)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Zero-mean Laplace with the given scale `b` (variance `2b²`), by inverse CDF.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        // u in (-1/2, 1/2], never exactly -1/2
        let u = 0.5 - self.inner.random::<f64>();
        let sign = if u < 0.0 { -1.0 } else { 1.0 };
        -scale * sign * (1.0 - 2.0 * u.abs()).ln()
    }

    /// Laplace standardized to unit variance.
    pub fn unit_laplace(&mut self) -> f64 {
        self.laplace(UNIT_LAPLACE_SCALE)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Uniformly random permutation of `0..n` (fixed points allowed).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut p: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            p.swap(i, j);
        }
        p.truncate(k);
        p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_equal_sequences() {
        let mut a = SeededRng::with_stream(42, 7);
        let mut b = SeededRng::with_stream(42, 7);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.unit_laplace().to_bits(), b.unit_laplace().to_bits());
        }
    }

    #[test]
    fn split_streams_differ() {
        let root = SeededRng::new(3);
        let mut a = root.split(0);
        let mut b = root.split(1);
        assert_ne!(a.stream(), b.stream());
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn unit_laplace_has_unit_variance() {
        let mut rng = SeededRng::new(11);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.unit_laplace()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = SeededRng::new(5);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
        let d = rng.sample_distinct(10, 10);
        let mut d2 = d.clone();
        d2.sort_unstable();
        assert_eq!(d2, (0..10).collect::<Vec<_>>());
    }
}
