//! Streaming calibration statistics (Welford update with Chan's merge).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Running count/min/max/mean/M2 over a stream of values.
///
/// Accumulation is done in `f64`; calibration streams can be long and the
/// merge must stay associative to well below `f32` resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub m2: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new()
    }
}

impl RunningStats {
    pub fn new() -> Self {
        Self { count: 0, min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0, m2: 0.0 }
    }

    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn extend<I: IntoIterator<Item = f32>>(&mut self, values: I) {
        for v in values {
            self.push(v as f64);
        }
    }

    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let mean = (self.mean + delta * nb / n).clamp(self.min.min(other.min), self.max.max(other.max));
        RunningStats {
            count: self.count + other.count,
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            mean,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Population variance `m2 / count`.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn abs_max(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Per-tensor statistics over every element of every batch.
pub fn collect_stats(batches: &[Tensor]) -> Result<RunningStats> {
    let mut stats = RunningStats::new();
    for b in batches {
        let mut local = RunningStats::new();
        local.extend(b.data().iter().copied());
        stats = stats.merge(&local);
    }
    if stats.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    Ok(stats)
}

/// Per-channel statistics, reducing over every axis except `axis`.
pub fn collect_stats_per_channel(batches: &[Tensor], axis: usize) -> Result<Vec<RunningStats>> {
    let first = batches.first().ok_or(Error::EmptyCalibration)?;
    if axis >= first.shape().len() {
        return Err(Error::Dimension(format!("channel axis {axis} of rank {}", first.shape().len())));
    }
    let channels = first.shape()[axis];
    let mut out = vec![RunningStats::new(); channels];
    for b in batches {
        if b.shape().len() != first.shape().len() || b.shape()[axis] != channels {
            return Err(Error::Dimension(format!(
                "batch shape {:?} disagrees with {:?} on channel axis",
                b.shape(),
                first.shape()
            )));
        }
        let stride: usize = b.shape()[axis + 1..].iter().product();
        let mut local = vec![RunningStats::new(); channels];
        for (i, &v) in b.data().iter().enumerate() {
            local[(i / stride) % channels].push(v as f64);
        }
        for (acc, l) in out.iter_mut().zip(&local) {
            *acc = acc.merge(l);
        }
    }
    Ok(out)
}
