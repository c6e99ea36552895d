//! Seeded synthetic data: activation profiles for initialization studies and
//! token sequences for calibration.

use crate::error::Result;
use crate::rotation::randomized_hadamard;
use crate::tensor::{IntTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT};

/// `n − 1` standard-normal samples followed by one value at `outlier`.
pub fn gaussian_with_outlier(n: usize, outlier: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    if let Some(last) = v.last_mut() {
        *last = outlier;
    }
    Tensor::from_vec(v).expect("n > 0")
}

pub fn student_t(n: usize, df: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = StudentT::new(df).expect("df > 0");
    Tensor::from_vec((0..n).map(|_| dist.sample(&mut rng) as f32).collect()).expect("n > 0")
}

/// Unrotated activation profile `[tokens × channels]`: a tight bulk near zero
/// (σ = 0.01), about 1% of entries at magnitude ≈ 1, and a single massive
/// activation of magnitude 20.
pub fn heavy_tailed_activations(tokens: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bulk = Normal::new(0.0f32, 0.01).expect("valid sigma");
    let mut data: Vec<f32> = (0..tokens * channels).map(|_| bulk.sample(&mut rng)).collect();
    for v in data.iter_mut() {
        if rng.random_bool(0.01) {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *v = sign * rng.random_range(0.8f32..1.2);
        }
    }
    let t = rng.random_range(0..tokens);
    let c = rng.random_range(0..channels);
    data[t * channels + c] = if rng.random_bool(0.5) { 20.0 } else { -20.0 };
    Tensor::new(vec![tokens, channels], data).expect("shape matches")
}

/// `x · D H` along the channel axis, the view a fused residual rotation gives.
pub fn rotated_activations(x: &Tensor, seed: u64) -> Result<Tensor> {
    let (_, channels) = x.dims2()?;
    let r = randomized_hadamard(channels, seed)?;
    x.matmul(&r.matrix)
}

/// Uniform token ids, `[num_seqs × seq_len]`.
pub fn token_sequences(num_seqs: usize, seq_len: usize, vocab: usize, seed: u64) -> IntTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..num_seqs * seq_len).map(|_| rng.random_range(0..vocab as i32)).collect();
    IntTensor::new(vec![num_seqs, seq_len], data).expect("shape matches")
}
