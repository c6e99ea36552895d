//! Quantization-parameter initialization and the rotation-aware policy that
//! picks between the two methods.
//!
//! * Mean-based: `s = max(|μ − 3σ|, |μ + 3σ|) / 2^(b−1)`; clips the tails and
//!   spends the grid on the bulk. Suited to rotated, near-Gaussian tensors.
//! * Max-Min: `s = (X_max − X_min) / (2^b − 1)` (or `max|X| / (2^(b−1) − 1)` for
//!   symmetric grids); covers the full range. Suited to unrotated heavy tails,
//!   which therefore need at least 8 bits.

use crate::error::{Error, Result};
use crate::quant::{self, asymmetric_params, fake_quantize, symmetric_scale, Granularity, QuantParams, QuantSpec, TensorClass, SCALE_FLOOR};
use crate::stats::{collect_stats, collect_stats_per_channel, RunningStats};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    MeanBased,
    MaxMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub method: InitMethod,
    pub min_bits: u32,
}

impl InitPolicy {
    /// Bit-width actually used for a quantizer that requested `bits`.
    pub fn effective_bits(&self, bits: u32) -> u32 {
        bits.max(self.min_bits)
    }
}

pub fn mean_based_init(stats: &RunningStats, spec: &QuantSpec) -> Result<QuantParams> {
    if stats.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let (mu, sigma) = (stats.mean, stats.std());
    let mag = (mu - 3.0 * sigma).abs().max((mu + 3.0 * sigma).abs());
    let scale = ((mag / (1u64 << (spec.bits - 1)) as f64) as f32).max(SCALE_FLOOR);
    Ok(QuantParams::per_tensor(scale, 0))
}

pub fn max_min_init(stats: &RunningStats, spec: &QuantSpec) -> Result<QuantParams> {
    if spec.symmetric {
        symmetric_scale(stats, spec)
    } else {
        asymmetric_params(stats, spec)
    }
}

/// Parameters for one quantizer from per-tensor or per-channel statistics.
pub fn init_from_stats(stats: &[RunningStats], spec: &QuantSpec, method: InitMethod) -> Result<QuantParams> {
    let one = |s: &RunningStats| match method {
        InitMethod::MeanBased => mean_based_init(s, spec),
        InitMethod::MaxMin => max_min_init(s, spec),
    };
    match (spec.granularity, stats) {
        (Granularity::PerTensor, [s]) => one(s),
        (Granularity::PerTensor, _) => Err(Error::Dimension(format!("per-tensor init from {} stats", stats.len()))),
        (Granularity::PerChannel { .. }, _) => {
            let params = stats.iter().map(one).collect::<Result<Vec<_>>>()?;
            Ok(QuantParams::from_channels(params))
        }
    }
}

/// Statistics matching the quantizer's granularity.
pub fn stats_for(batches: &[Tensor], spec: &QuantSpec) -> Result<Vec<RunningStats>> {
    match spec.granularity {
        Granularity::PerTensor => Ok(vec![collect_stats(batches)?]),
        Granularity::PerChannel { axis } => collect_stats_per_channel(batches, axis),
    }
}

/// Rotated tensors use Mean-based init at the requested width; unrotated ones
/// use Max-Min with at least 8 bits.
pub fn select_policy(tensor_class: TensorClass, requested_bits: u32) -> InitPolicy {
    match tensor_class {
        TensorClass::Rotated => InitPolicy { method: InitMethod::MeanBased, min_bits: requested_bits },
        TensorClass::Unrotated => InitPolicy { method: InitMethod::MaxMin, min_bits: requested_bits.max(8) },
    }
}

fn relative_mse(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<f64> {
    let fq = fake_quantize(x, params, spec)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in fq.data().iter().zip(x.data()) {
        let d = (a - b) as f64;
        num += d * d;
        den += (b as f64) * (b as f64);
    }
    Ok(if den > 0.0 { num / den } else { num })
}

/// `‖fq(x) − x‖² / ‖x‖²` after initializing from `x` itself with `policy`.
pub fn init_quality_probe(x: &Tensor, spec: &QuantSpec, policy: &InitPolicy) -> Result<f64> {
    let spec = spec.with_bits(policy.effective_bits(spec.bits))?;
    let stats = stats_for(std::slice::from_ref(x), &spec)?;
    let params = init_from_stats(&stats, &spec, policy.method)?;
    relative_mse(x, &params, &spec)
}

/// Comparison baseline: symmetric scale from a fixed percentile of `|x|`.
pub fn clip_quality_probe(x: &Tensor, spec: &QuantSpec, percentile: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&percentile) || !spec.symmetric {
        return Err(Error::Argument("percentile clipping needs a symmetric spec and p in [0, 100]".into()));
    }
    let mut mags: Vec<f32> = x.data().iter().map(|v| v.abs()).collect();
    mags.sort_by(f32::total_cmp);
    let idx = (((percentile / 100.0) * (mags.len() - 1) as f64).round() as usize).min(mags.len() - 1);
    let levels = spec.q_max() as f32;
    let params = QuantParams::per_tensor((mags[idx] / levels).max(quant::SCALE_FLOOR), 0);
    let spec = QuantSpec { granularity: Granularity::PerTensor, ..*spec };
    relative_mse(x, &params, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn stats_of(mean: f64, std: f64) -> RunningStats {
        RunningStats { count: 10, min: mean - 5.0 * std, max: mean + 5.0 * std, mean, m2: std * std * 10.0 }
    }

    fn sym(bits: u32) -> QuantSpec {
        QuantSpec::symmetric_per_tensor(bits, TensorClass::Rotated).unwrap()
    }

    #[test]
    fn mean_based_examples() {
        assert_eq!(mean_based_init(&stats_of(0.0, 1.0), &sym(4)).unwrap().scale[0], 0.375);
        assert_eq!(mean_based_init(&stats_of(0.0, 0.0), &sym(8)).unwrap().scale[0], 1e-8);
        assert_eq!(mean_based_init(&stats_of(1.0, 1.0), &sym(8)).unwrap().scale[0], 0.03125);
    }

    #[test]
    fn max_min_examples() {
        let asym = |bits| QuantSpec::new(bits, false, Granularity::PerTensor, false, TensorClass::Unrotated).unwrap();
        let s = collect_stats(&[Tensor::from_vec(vec![0.0, 15.0]).unwrap()]).unwrap();
        assert_eq!(max_min_init(&s, &asym(4)).unwrap().scale[0], 1.0);
        let s = collect_stats(&[Tensor::from_vec(vec![-2.0, 6.0]).unwrap()]).unwrap();
        assert!((max_min_init(&s, &asym(8)).unwrap().scale[0] - 0.031373).abs() < 1e-6);
        let s = collect_stats(&[Tensor::from_vec(vec![2.0, 2.0]).unwrap()]).unwrap();
        assert_eq!(max_min_init(&s, &asym(8)).unwrap().scale[0], 1e-8);
        let zero = collect_stats(&[Tensor::zeros(&[4])]).unwrap();
        assert_eq!(max_min_init(&zero, &sym(8)).unwrap().scale[0], 1e-8);
    }

    #[test]
    fn symmetric_max_min_equals_symmetric_scale() {
        let x = Tensor::from_vec(vec![-3.0, -1.0, 0.0, 1.0, 3.0]).unwrap();
        let s = collect_stats(&[x]).unwrap();
        assert_eq!(max_min_init(&s, &sym(8)).unwrap(), symmetric_scale(&s, &sym(8)).unwrap());
    }

    #[test]
    fn policy_table() {
        assert_eq!(select_policy(TensorClass::Rotated, 4), InitPolicy { method: InitMethod::MeanBased, min_bits: 4 });
        assert_eq!(select_policy(TensorClass::Unrotated, 4), InitPolicy { method: InitMethod::MaxMin, min_bits: 8 });
        assert_eq!(select_policy(TensorClass::Unrotated, 16), InitPolicy { method: InitMethod::MaxMin, min_bits: 16 });
        for class in [TensorClass::Rotated, TensorClass::Unrotated] {
            for bits in [4, 8, 16] {
                let p = select_policy(class, bits);
                assert!(p.min_bits >= bits);
                if class == TensorClass::Unrotated {
                    assert!(p.min_bits >= 8);
                }
            }
        }
    }

    #[test]
    fn per_channel_init_uses_channel_stats() {
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, -30.0, 5.0]).unwrap();
        let spec = QuantSpec::symmetric_per_channel(8, 0, TensorClass::Rotated).unwrap();
        let stats = stats_for(&[w], &spec).unwrap();
        let p = init_from_stats(&stats, &spec, InitMethod::MaxMin).unwrap();
        assert_eq!(p.scale, vec![2.0 / 127.0, 30.0 / 127.0]);
    }

    #[test]
    fn mean_based_scale_permutation_invariant() {
        let mut v: Vec<f32> = (0..101).map(|i| ((i * 37) % 101) as f32 * 0.1 - 5.0).collect();
        let a = init_quality_probe(&Tensor::from_vec(v.clone()).unwrap(), &sym(4), &select_policy(TensorClass::Rotated, 4)).unwrap();
        let sa = mean_based_init(&collect_stats(&[Tensor::from_vec(v.clone()).unwrap()]).unwrap(), &sym(4)).unwrap();
        v.reverse();
        let sb = mean_based_init(&collect_stats(&[Tensor::from_vec(v.clone()).unwrap()]).unwrap(), &sym(4)).unwrap();
        let b = init_quality_probe(&Tensor::from_vec(v).unwrap(), &sym(4), &select_policy(TensorClass::Rotated, 4)).unwrap();
        assert_eq!(sa, sb);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn probe_grid_aligned_is_lossless() {
        let x = Tensor::from_vec(vec![-7.0, -3.0, 0.0, 2.0, 7.0]).unwrap();
        let p = InitPolicy { method: InitMethod::MaxMin, min_bits: 4 };
        assert_eq!(init_quality_probe(&x, &sym(4), &p).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_with_outlier_prefers_mean_based_at_4_bits() {
        let x = synthetic::gaussian_with_outlier(10_000, 50.0, 3);
        let mb = init_quality_probe(&x, &sym(4), &InitPolicy { method: InitMethod::MeanBased, min_bits: 4 }).unwrap();
        let mm = init_quality_probe(&x, &sym(4), &InitPolicy { method: InitMethod::MaxMin, min_bits: 4 }).unwrap();
        assert!(mb < mm, "mean-based {mb} vs max-min {mm}");
    }

    #[test]
    fn student_t_prefers_max_min_at_8_bits() {
        let x = synthetic::student_t(10_000, 2.0, 5);
        let mb = init_quality_probe(&x, &sym(8), &InitPolicy { method: InitMethod::MeanBased, min_bits: 8 }).unwrap();
        let mm = init_quality_probe(&x, &sym(8), &InitPolicy { method: InitMethod::MaxMin, min_bits: 8 }).unwrap();
        assert!(mm < mb, "max-min {mm} vs mean-based {mb}");
    }

    #[test]
    fn full_percentile_clip_is_max_min() {
        let x = synthetic::gaussian_with_outlier(4096, 9.0, 4);
        let mm = init_quality_probe(&x, &sym(8), &InitPolicy { method: InitMethod::MaxMin, min_bits: 8 }).unwrap();
        assert_eq!(clip_quality_probe(&x, &sym(8), 100.0).unwrap(), mm);
        assert!(clip_quality_probe(&x, &sym(8), 101.0).is_err());
    }
}
