//! Weight-initialization draws shared by every model.

use super::rng::Rng;

/// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..n).map(|_| rng.uniform_in(-a, a)).collect()
}

/// Uniform(−0.02, 0.02), used for embedding tables and codebooks.
pub fn embedding(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform_in(-0.02, 0.02)).collect()
}
