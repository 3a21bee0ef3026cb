#![allow(dead_code)]
pub mod oracles;

use dualpath_core::model::{Batch, ModelConfig};
use dualpath_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Random inputs for `cfg` plus targets in `[0, 1]`.
pub fn random_batch(cfg: &ModelConfig, b: usize, t_f: usize, frames: usize, seed: u64) -> (Batch, Tensor) {
    let mut r = rng(seed);
    let batch = Batch {
        visual: Some(normal(&[b, t_f, cfg.d_v], &mut r)),
        semantic: Some(normal(&[b, t_f, cfg.d_s], &mut r)),
        spectrogram: Some(normal(&[b, cfg.n_mels, frames], &mut r)),
        t_f,
    };
    let target = Tensor::from_fn(&[b, t_f], |_| r.random_range(0.0..1.0));
    (batch, target)
}
