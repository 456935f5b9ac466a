//! Deterministic randomness.
//!
//! Everything stochastic in the crate draws from one counter-based generator
//! (ChaCha8) so that a `(config, seed)` pair fully determines every dataset,
//! initialization, and batch order. Independent consumers get independent
//! streams of the same seed rather than sharing a mutable generator.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seed plus stream id; `stream` derives an independent generator, so parallel
/// workers can be handed disjoint streams deterministically.
#[derive(Debug, Clone, Copy)]
pub struct Prng {
    seed: u64,
    stream: u64,
}

impl Prng {
    pub fn seed(seed: u64) -> Self {
        Prng { seed, stream: 0 }
    }

    /// Independent generator for sub-task `k` of the same seed.
    pub fn stream(self, k: u64) -> Self {
        Prng {
            seed: self.seed,
            stream: self.stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k + 1),
        }
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data length consistent")
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
