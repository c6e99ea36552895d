//! Uniform affine quantization, its straight-through gradients and the local
//! reconstruction loss.
//!
//! `x̂ = s · (clamp(⌊x/s + z⌉, q_min, q_max) − z)`, with `⌊·⌉` rounding half to
//! even. Per-channel quantizers carry one `(s, z)` pair per slice along the
//! channel axis.

use crate::error::{Error, Result};
use crate::stats::RunningStats;
use crate::tensor::{IntTensor, Tensor};
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Smallest scale ever produced; constant tensors would otherwise divide by zero.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Whether a tensor's distribution has been smoothed by a fused rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorClass {
    Rotated,
    Unrotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub signed: bool,
    pub tensor_class: TensorClass,
}

impl QuantSpec {
    pub fn new(
        bits: u32,
        symmetric: bool,
        granularity: Granularity,
        signed: bool,
        tensor_class: TensorClass,
    ) -> Result<Self> {
        if !matches!(bits, 4 | 8 | 16) {
            return Err(Error::Argument(format!("bit-width {bits} not in {{4, 8, 16}}")));
        }
        Ok(Self { bits, symmetric, granularity, signed, tensor_class })
    }

    /// Signed symmetric per-tensor quantizer, the activation default.
    pub fn symmetric_per_tensor(bits: u32, tensor_class: TensorClass) -> Result<Self> {
        Self::new(bits, true, Granularity::PerTensor, true, tensor_class)
    }

    /// Signed symmetric quantizer with one scale per slice along `axis`.
    pub fn symmetric_per_channel(bits: u32, axis: usize, tensor_class: TensorClass) -> Result<Self> {
        Self::new(bits, true, Granularity::PerChannel { axis }, true, tensor_class)
    }

    pub fn q_min(&self) -> i32 {
        if self.signed {
            -(1i32 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i32 {
        if self.signed {
            (1i32 << (self.bits - 1)) - 1
        } else {
            ((1i64 << self.bits) - 1) as i32
        }
    }

    pub fn with_bits(mut self, bits: u32) -> Result<Self> {
        self = Self::new(bits, self.symmetric, self.granularity, self.signed, self.tensor_class)?;
        Ok(self)
    }
}

/// Scale(s) and zero-point(s) of one quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<i32>,
    pub learnable: bool,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32) -> Self {
        Self { scale: vec![scale], zero_point: vec![zero_point], learnable: false }
    }

    /// Concatenates single-channel params into one per-channel set.
    pub fn from_channels(channels: Vec<QuantParams>) -> Self {
        let mut scale = Vec::with_capacity(channels.len());
        let mut zero_point = Vec::with_capacity(channels.len());
        for c in channels {
            scale.extend(c.scale);
            zero_point.extend(c.zero_point);
        }
        Self { scale, zero_point, learnable: false }
    }

    pub fn num_channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self, spec: &QuantSpec) -> Result<()> {
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Argument("scale/zero-point length mismatch".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(Error::Argument(format!("scale must be positive and finite, got {s}")));
        }
        if let Some(z) = self.zero_point.iter().find(|z| **z < spec.q_min() || **z > spec.q_max()) {
            return Err(Error::Argument(format!(
                "zero-point {z} outside [{}, {}]",
                spec.q_min(),
                spec.q_max()
            )));
        }
        if spec.symmetric && self.zero_point.iter().any(|&z| z != 0) {
            return Err(Error::Argument("symmetric quantizer with non-zero zero-point".into()));
        }
        Ok(())
    }
}

/// Round half to even for any float type.
pub fn round_half_even<F: Float>(v: F) -> F {
    let f = v.floor();
    let diff = v - f;
    let half = F::from(0.5).unwrap();
    let one = F::one();
    if diff > half {
        f + one
    } else if diff < half {
        f
    } else {
        let two = one + one;
        if (f / two).floor() * two == f {
            f
        } else {
            f + one
        }
    }
}

/// `clamp(⌊x/s + z⌉)` as a float-valued integer.
#[inline]
pub fn quantize_value<F: Float>(x: F, scale: F, zp: F, q_min: F, q_max: F) -> F {
    let v = round_half_even(x / scale + zp);
    if v < q_min {
        q_min
    } else if v > q_max {
        q_max
    } else {
        v
    }
}

#[inline]
pub fn fake_quantize_value<F: Float>(x: F, scale: F, zp: F, q_min: F, q_max: F) -> F {
    scale * (quantize_value(x, scale, zp, q_min, q_max) - zp)
}

/// Maps a flat element index to its channel for the given granularity.
pub(crate) fn channel_indexer(shape: &[usize], params: &QuantParams, granularity: Granularity) -> Result<impl Fn(usize) -> usize> {
    let (stride, channels) = match granularity {
        Granularity::PerTensor => {
            if params.num_channels() != 1 {
                return Err(Error::Dimension(format!(
                    "per-tensor quantizer with {} parameter sets",
                    params.num_channels()
                )));
            }
            (1, 1)
        }
        Granularity::PerChannel { axis } => {
            if axis >= shape.len() {
                return Err(Error::Dimension(format!("channel axis {axis} of rank {}", shape.len())));
            }
            if shape[axis] != params.num_channels() {
                return Err(Error::Dimension(format!(
                    "{} channels on axis {axis} but {} parameter sets",
                    shape[axis],
                    params.num_channels()
                )));
            }
            (shape[axis + 1..].iter().product::<usize>(), shape[axis])
        }
    };
    Ok(move |i: usize| (i / stride) % channels)
}

pub fn quantize(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<IntTensor> {
    params.validate(spec)?;
    let ch = channel_indexer(x.shape(), params, spec.granularity)?;
    let (lo, hi) = (spec.q_min() as f32, spec.q_max() as f32);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = ch(i);
            quantize_value(v, params.scale[c], params.zero_point[c] as f32, lo, hi) as i32
        })
        .collect();
    IntTensor::new(x.shape().to_vec(), data)
}

/// `s · (q − z)`. Granularity is inferred from the number of parameter sets
/// unless a spec is given via [`dequantize_with`].
pub fn dequantize(q: &IntTensor, params: &QuantParams) -> Result<Tensor> {
    let gran = if params.num_channels() == 1 {
        Granularity::PerTensor
    } else {
        let axis = q
            .shape()
            .iter()
            .position(|&d| d == params.num_channels())
            .ok_or_else(|| Error::Dimension("no axis matches the channel count".into()))?;
        Granularity::PerChannel { axis }
    };
    dequantize_with(q, params, gran)
}

pub fn dequantize_with(q: &IntTensor, params: &QuantParams, granularity: Granularity) -> Result<Tensor> {
    let ch = channel_indexer(q.shape(), params, granularity)?;
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = ch(i);
            params.scale[c] * (v - params.zero_point[c]) as f32
        })
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

pub fn fake_quantize(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<Tensor> {
    params.validate(spec)?;
    let ch = channel_indexer(x.shape(), params, spec.granularity)?;
    let (lo, hi) = (spec.q_min() as f32, spec.q_max() as f32);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = ch(i);
            fake_quantize_value(v, params.scale[c], params.zero_point[c] as f32, lo, hi)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Straight-through derivative of `x̂` with respect to the scale.
///
/// In range this is `⌊v⌉ − v` with `v = x/s + z`; on or beyond the clipping
/// bounds it is `q_min − z` or `q_max − z`.
#[inline]
pub fn ste_grad_scale(x: f32, s: f32, zp: i32, q_min: i32, q_max: i32) -> f32 {
    let zpf = zp as f32;
    let v = x / s + zpf;
    if v <= q_min as f32 {
        (q_min - zp) as f32
    } else if v >= q_max as f32 {
        (q_max - zp) as f32
    } else {
        round_half_even(v) - v
    }
}

/// Straight-through derivative of `x̂` with respect to the zero-point.
#[inline]
pub fn ste_grad_zero_point(x: f32, s: f32, zp: i32, q_min: i32, q_max: i32) -> f32 {
    let v = x / s + zp as f32;
    if v > q_min as f32 && v < q_max as f32 {
        0.0
    } else {
        -s
    }
}

/// Straight-through derivative of `x̂` with respect to the input.
#[inline]
pub fn ste_grad_input(x: f32, s: f32, zp: i32, q_min: i32, q_max: i32) -> f32 {
    let v = x / s + zp as f32;
    if v > q_min as f32 && v < q_max as f32 {
        1.0
    } else {
        0.0
    }
}

/// `1 / √(num_elements · q_max)`, applied to scale and zero-point gradients.
pub fn gradient_scale_factor(num_elements: usize, q_max: i32) -> Result<f32> {
    if num_elements == 0 || q_max <= 0 {
        return Err(Error::Argument(format!(
            "gradient scale needs positive inputs, got num_elements={num_elements}, q_max={q_max}"
        )));
    }
    Ok((1.0 / ((num_elements as f64) * (q_max as f64)).sqrt()) as f32)
}

/// `‖fq(x) − x‖²`.
pub fn local_quant_loss(x: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<f32> {
    let fq = fake_quantize(x, params, spec)?;
    Ok(fq
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum())
}

/// `max|X| / (2^(bits−1) − 1)`, zero-point 0.
pub fn symmetric_scale(stats: &RunningStats, spec: &QuantSpec) -> Result<QuantParams> {
    if !spec.symmetric {
        return Err(Error::Argument("symmetric_scale on an asymmetric spec".into()));
    }
    if stats.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let levels = ((1u64 << (spec.bits - 1)) - 1) as f64;
    let scale = ((stats.abs_max() / levels) as f32).max(SCALE_FLOOR);
    Ok(QuantParams::per_tensor(scale, 0))
}

/// `(max − min) / (2^bits − 1)` with zero-point `q_min + round(−min / scale)`.
///
/// For the usual unsigned grid `q_min = 0` and this is the textbook formula;
/// the offset keeps signed asymmetric grids anchored at their lower bound.
pub fn asymmetric_params(stats: &RunningStats, spec: &QuantSpec) -> Result<QuantParams> {
    if spec.symmetric {
        return Err(Error::Argument("asymmetric_params on a symmetric spec".into()));
    }
    if stats.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let levels = ((1u64 << spec.bits) - 1) as f64;
    let range = stats.max - stats.min;
    let scale = (range / levels) as f32;
    if range.is_nan() || range <= 0.0 || scale < SCALE_FLOOR {
        return Ok(QuantParams::per_tensor(SCALE_FLOOR, spec.q_min()));
    }
    // −min/scale evaluated as −min·levels/range keeps exact halves exact.
    let zp = spec.q_min() as f64 + round_half_even(-stats.min * levels / range);
    let zp = zp.clamp(spec.q_min() as f64, spec.q_max() as f64) as i32;
    Ok(QuantParams::per_tensor(scale, zp))
}
