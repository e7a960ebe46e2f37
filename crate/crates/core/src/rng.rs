//! Labelled deterministic random streams.
//!
//! Every stream is keyed by `(seed, label)`. The key is hashed into a ChaCha
//! seed, so two labels never share a stream and a stream's draws do not depend
//! on how much any other stream has been consumed.

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

pub fn seeded_rng(seed: u64, label: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    Rng {
        seed,
        label: label.to_string(),
        inner: ChaCha8Rng::from_seed(key),
    }
}

impl Rng {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Independent stream `label/sub` under the same seed.
    pub fn child(&self, sub: &str) -> Rng {
        seeded_rng(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let z: f32 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| self.normal(0.0, std)).collect()
    }

    /// `amount` distinct indices from `[0, n)`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
