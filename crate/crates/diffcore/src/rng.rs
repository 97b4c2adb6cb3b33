use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

/// Counter-based generator (ChaCha8). Independent streams are derived from
/// `(seed, stream)` so fan-out never shares state.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator on its own stream, derived from the parent's seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// I.i.d. standard normal tensor.
    pub fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.standard_normal())).collect();
        Tensor::new(shape, data).expect("element count from shape")
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            all.swap(i, j);
        }
        all.truncate(k);
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f32> = Rng::new(7).normal(&[4, 5]);
        let b: Tensor<f32> = Rng::new(7).normal(&[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f64> = Rng::new(1).normal(&[16]);
        let b: Tensor<f64> = Rng::new(2).normal(&[16]);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn streams_are_independent_of_draw_order() {
        let mut parent = Rng::new(3);
        let _ = parent.uniform();
        let a = parent.fork(5).uniform();
        let b = Rng::new(3).fork(5).uniform();
        assert_eq!(a, b);
        assert_ne!(Rng::stream(3, 5).uniform(), Rng::stream(3, 6).uniform());
    }

    #[test]
    fn million_normals_have_unit_moments() {
        let t: Tensor<f64> = Rng::new(2024).normal(&[1_000_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut r = Rng::new(9);
        let mut s = r.sample_indices(20, 7);
        assert_eq!(s.len(), 7);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|&i| i < 20));
    }
}
