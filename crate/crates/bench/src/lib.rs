//! Seeded inputs shared by the benchmarks in `benches/`.

use mantis_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `n` noisy sinusoids of length `len`, flattened row by row.
pub fn channels(n: usize, len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .flat_map(|_| {
            let f = rng.random_range(1.0..8.0);
            let noise: Vec<f32> = (0..len).map(|_| rng.random_range(-0.1..0.1)).collect();
            (0..len).map(move |t| (f * t as f32 / len as f32 * std::f32::consts::TAU).sin() + noise[t])
        })
        .collect()
}

/// Logits and labels for calibration benchmarks.
pub fn logits(n: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = (0..n * k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (logits, labels)
}
