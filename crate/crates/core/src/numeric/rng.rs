use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded counter-based random source.
///
/// Backed by ChaCha8 keyed by `seed` with `stream` selecting an independent
/// keystream; the position inside the keystream is the counter. Parallel
/// work derives one source per unit of work (`stream = image index`) so no
/// generator state is ever shared between threads.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RandomSource { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// A fresh source on another stream under the same seed.
    pub fn fork(&self, stream: u64) -> RandomSource {
        RandomSource::new(self.seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// I.i.d. standard normal tensor.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = RandomSource::new(3407, 0).gaussian(&[64, 3]);
        let b = RandomSource::new(3407, 0).gaussian(&[64, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a = RandomSource::new(3407, 0).gaussian(&[32]);
        let b = RandomSource::new(3407, 1).gaussian(&[32]);
        assert_ne!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let t = RandomSource::new(11, 5).gaussian(&[n]);
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() <= 0.004, "mean {mean}");
        assert!((0.995..=1.005).contains(&var), "var {var}");
    }

    #[test]
    fn independent_streams_are_uncorrelated() {
        let n = 200_000;
        let a = RandomSource::new(1, 0).gaussian(&[n]);
        let b = RandomSource::new(1, 1).gaussian(&[n]);
        let corr: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // 4 standard errors of the sample correlation
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut p = RandomSource::new(9, 2).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
