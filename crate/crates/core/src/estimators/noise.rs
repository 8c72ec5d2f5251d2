use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based source of standard-normal noise.
///
/// Every `(step, layer, sample)` triple owns an independent ChaCha stream,
/// so draws do not depend on evaluation order or thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

/// Layer key reserved for weight-space tangents.
pub(crate) const WEIGHT_SPACE: u64 = u64::MAX;

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, step: u64, layer: u64, sample: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_exact_mut(8).zip([self.seed, step, layer, sample]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    pub fn normal(&self, step: u64, layer: u64, sample: u64, len: usize) -> Vec<f64> {
        let mut rng = self.rng(step, layer, sample);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
