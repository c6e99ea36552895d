//! Quantization sensitivity, the 8/16-bit promotion planner and the
//! rounding/clipping error split.

use crate::error::{Error, Result};
use crate::init::{init_from_stats, stats_for, InitMethod};
use crate::quant::{channel_indexer, fake_quantize, QuantParams, QuantSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Position used for deterministic tie-breaking (layer index for down_proj probes).
    pub site_index: usize,
    pub site: String,
    pub ratio: f64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteBits {
    pub site_index: usize,
    pub site: String,
    pub ratio: f64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub promote_fraction: f64,
    /// In the order the reports were given.
    pub assignments: Vec<SiteBits>,
}

impl PrecisionPlan {
    pub fn bits_for(&self, site_index: usize) -> Option<u32> {
        self.assignments.iter().find(|a| a.site_index == site_index).map(|a| a.bits)
    }

    pub fn promoted(&self) -> usize {
        self.assignments.iter().filter(|a| a.bits == 16).count()
    }
}

/// Mean relative error `(1/N) Σ |dqᵢ − xᵢ| / (|xᵢ| + 1e-8)`.
pub fn sensitivity_ratio(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Argument("sensitivity of an empty tensor".into()));
    }
    let dq = fake_quantize(x, params, spec)?;
    Ok(ratio_of(x, &dq))
}

pub(crate) fn ratio_of(x: &Tensor, dq: &Tensor) -> f64 {
    let total: f64 = dq
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &o)| ((d - o) as f64).abs() / ((o as f64).abs() + RATIO_EPS))
        .sum();
    total / x.len() as f64
}

/// Ratio after Max-Min initialization from `x` at the quantizer's bit-width.
pub fn probe_sensitivity(x: &Tensor, spec: &QuantSpec) -> Result<f64> {
    let stats = stats_for(std::slice::from_ref(x), spec)?;
    let params = init_from_stats(&stats, spec, InitMethod::MaxMin)?;
    sensitivity_ratio(x, &params, spec)
}

/// `⌈fraction · n⌉`, robust to `0.1 · 30` landing a hair above 3.
pub fn promoted_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let c = (raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0) as usize;
    c.min(n)
}

/// Promotes the most sensitive `⌈fraction · n⌉` sites to 16 bits.
/// Ties break toward the lower site index.
pub fn plan_mixed_precision(reports: &[SensitivityReport], promote_fraction: f64) -> Result<PrecisionPlan> {
    if reports.is_empty() {
        return Err(Error::Argument("no sensitivity reports to plan over".into()));
    }
    if !(0.0..=1.0).contains(&promote_fraction) {
        return Err(Error::Argument(format!("promote fraction {promote_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .ratio
            .total_cmp(&reports[a].ratio)
            .then(reports[a].site_index.cmp(&reports[b].site_index))
    });
    let k = promoted_count(promote_fraction, reports.len());
    let mut bits = vec![8u32; reports.len()];
    for &i in &order[..k] {
        bits[i] = 16;
    }
    Ok(PrecisionPlan {
        promote_fraction,
        assignments: reports
            .iter()
            .zip(bits)
            .map(|(r, bits)| SiteBits { site_index: r.site_index, site: r.site.clone(), ratio: r.ratio, bits })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub e_rounding: f64,
    pub e_clipping: f64,
    pub e_total: f64,
}

/// Splits `Σ (dq − x)²` by whether `x/s + z` lands inside `[q_min, q_max]`.
/// `e_total` is the sum of the two disjoint parts.
pub fn error_decomposition(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<ErrorDecomposition> {
    let dq = fake_quantize(x, params, spec)?;
    let ch = channel_indexer(x.shape(), params, spec.granularity)?;
    let (lo, hi) = (spec.q_min() as f32, spec.q_max() as f32);
    let (mut rounding, mut clipping) = (0.0f64, 0.0f64);
    for (i, (&o, &d)) in x.data().iter().zip(dq.data()).enumerate() {
        let c = ch(i);
        let v = o / params.scale[c] + params.zero_point[c] as f32;
        let e = (d - o) as f64;
        if v >= lo && v <= hi {
            rounding += e * e;
        } else {
            clipping += e * e;
        }
    }
    Ok(ErrorDecomposition { e_rounding: rounding, e_clipping: clipping, e_total: rounding + clipping })
}

/// [`error_decomposition`] at each per-tensor scale in `scales` (zero-point 0).
pub fn sweep_scale_tradeoff(x: &Tensor, spec: &QuantSpec, scales: &[f32]) -> Result<Vec<(f32, ErrorDecomposition)>> {
    if scales.is_empty() {
        return Err(Error::Argument("empty scale grid".into()));
    }
    scales
        .iter()
        .map(|&s| Ok((s, error_decomposition(x, &QuantParams::per_tensor(s, 0), spec)?)))
        .collect()
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f32, hi: f32, n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp() as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::TensorClass;
    use crate::synthetic;

    fn spec(bits: u32) -> QuantSpec {
        QuantSpec::symmetric_per_tensor(bits, TensorClass::Unrotated).unwrap()
    }

    fn report(i: usize, ratio: f64) -> SensitivityReport {
        SensitivityReport { site_index: i, site: format!("s{i}"), ratio, bits: 8 }
    }

    #[test]
    fn lossless_ratio_is_zero() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(sensitivity_ratio(&x, &QuantParams::per_tensor(0.5, 0), &spec(8)).unwrap(), 0.0);
    }

    #[test]
    fn everything_rounds_to_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]).unwrap();
        let r = sensitivity_ratio(&x, &QuantParams::per_tensor(1000.0, 0), &spec(8)).unwrap();
        assert!((1.0 - 1e-8..=1.0).contains(&r));
    }

    #[test]
    fn hand_ratio() {
        let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let dq = Tensor::from_vec(vec![1.5, 2.0]).unwrap();
        assert!((ratio_of(&x, &dq) - 0.25).abs() < 1e-8);
    }

    #[test]
    fn thirty_sites_ten_percent() {
        let reports: Vec<_> = (0..30).map(|i| report(i, (i * 7 % 30) as f64)).collect();
        assert_eq!(plan_mixed_precision(&reports, 0.10).unwrap().promoted(), 3);
        assert_eq!(plan_mixed_precision(&reports, 0.0).unwrap().promoted(), 0);
        assert_eq!(plan_mixed_precision(&reports, 1.0).unwrap().promoted(), 30);
        assert!(plan_mixed_precision(&reports, 1.5).is_err());
        assert!(plan_mixed_precision(&[], 0.5).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let reports = vec![report(2, 0.5), report(0, 0.5), report(1, 0.1)];
        let plan = plan_mixed_precision(&reports, 0.2).unwrap();
        assert_eq!(plan.bits_for(0), Some(16));
        assert_eq!(plan.bits_for(2), Some(8));
    }

    #[test]
    fn nested_plans() {
        let reports: Vec<_> = (0..17).map(|i| report(i, ((i * 13) % 5) as f64 * 0.1)).collect();
        let mut prev = plan_mixed_precision(&reports, 0.0).unwrap();
        for k in 1..=20 {
            let next = plan_mixed_precision(&reports, k as f64 / 20.0).unwrap();
            for (a, b) in prev.assignments.iter().zip(&next.assignments) {
                assert!(!(a.bits == 16 && b.bits == 8));
            }
            prev = next;
        }
    }

    #[test]
    fn decomposition_extremes() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]).unwrap();
        let d = error_decomposition(&x, &QuantParams::per_tensor(0.1, 0), &spec(8)).unwrap();
        assert_eq!(d.e_clipping, 0.0);
        let d = error_decomposition(&x, &QuantParams::per_tensor(1e-6, 0), &spec(4)).unwrap();
        assert_eq!(d.e_rounding, 0.0);
        assert_eq!(d.e_total, d.e_rounding + d.e_clipping);
    }

    #[test]
    fn single_point_sweep() {
        let x = synthetic::gaussian_with_outlier(100, 5.0, 1);
        let one = sweep_scale_tradeoff(&x, &spec(4), &[0.3]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1, error_decomposition(&x, &QuantParams::per_tensor(0.3, 0), &spec(4)).unwrap());
        assert!(sweep_scale_tradeoff(&x, &spec(4), &[]).is_err());
    }

    #[test]
    fn gaussian_total_error_is_unimodal() {
        let x = synthetic::gaussian_with_outlier(10_000, 0.0, 8);
        let curve = sweep_scale_tradeoff(&x, &spec(4), &log_grid(1e-3, 5.0, 64)).unwrap();
        let e: Vec<f64> = curve.iter().map(|c| c.1.e_total).collect();
        let minima = (1..e.len() - 1).filter(|&i| e[i] < e[i - 1] && e[i] < e[i + 1]).count();
        assert_eq!(minima, 1);
    }

    #[test]
    fn heavy_tail_rounding_grows_past_central_optimum() {
        let mut x = synthetic::gaussian_with_outlier(10_000, 50.0, 2).into_data();
        x[0] = -50.0;
        let x = Tensor::from_vec(x).unwrap();
        let grid = log_grid(0.05, 7.0, 48);
        let curve = sweep_scale_tradeoff(&x, &spec(4), &grid).unwrap();
        let best = (0..curve.len()).min_by(|&a, &b| curve[a].1.e_total.total_cmp(&curve[b].1.e_total)).unwrap();
        for w in curve[best..].windows(2) {
            assert!(w[1].1.e_rounding > w[0].1.e_rounding);
        }
    }
}
