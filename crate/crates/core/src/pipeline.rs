//! Two-stage calibration of a [`ToyModel`]: policy initialization, the
//! `down_proj` precision plan, gradient-based stage one over rotations and
//! linear input/weight quantizers, then static stage-two calibration of the
//! remaining sites.

use crate::error::{Error, Result};
use crate::init::{init_from_stats, select_policy, stats_for, InitMethod};
use crate::model::{Phase, Role, Stage, Tap, ToyModel};
use crate::quant::{gradient_scale_factor, Granularity, TensorClass, SCALE_FLOOR};
use crate::sensitivity::{error_decomposition, plan_mixed_precision, ErrorDecomposition, probe_sensitivity, PrecisionPlan, SensitivityReport};
use crate::stats::RunningStats;
use crate::tape::{QuantAxis, Tape};
use crate::tensor::{IntTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Rotation-aware rule: mean-based for rotated tensors, Max-Min with an
    /// 8-bit floor otherwise.
    Policy,
    /// As `Policy`, but rotated sites at 4 bits or fewer use Max-Min.
    MaxMinLowBit,
    /// Max-Min at every site.
    MaxMinEverywhere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub warmup_local_loss_steps: usize,
    pub lr_rotation: f64,
    pub lr_quant: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { steps: 512, warmup_local_loss_steps: 128, lr_rotation: 0.1, lr_quant: 0.01, batch_size: 4, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_local_loss_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_local_loss_steps {} exceeds steps {}",
                self.warmup_local_loss_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_rotation", self.lr_rotation), ("lr_quant", self.lr_quant)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} = {lr} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Cosine decay from 1 at step 0 toward 0 at `steps`.
    pub fn decay(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub teacher_mse: f64,
    pub local_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneReport {
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteError {
    pub site: String,
    pub relative_error: f64,
    pub e_rounding: f64,
    pub e_clipping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub per_site: Vec<SiteError>,
}

/// Splits `[num_seqs × seq_len]` tokens into consecutive blocks of `batch_size` sequences.
pub fn calibration_batches(tokens: &IntTensor, batch_size: usize) -> Result<Vec<IntTensor>> {
    let (n, t) = match tokens.shape() {
        [n, t] => (*n, *t),
        s => return Err(Error::Dimension(format!("token data must be [sequences × length], got {s:?}"))),
    };
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    (0..n)
        .step_by(batch_size)
        .map(|start| {
            let rows = batch_size.min(n - start);
            IntTensor::new(vec![rows, t], tokens.data()[start * t..(start + rows) * t].to_vec())
        })
        .collect()
}

/// fp32 teacher logits per batch.
pub fn teacher_logits(model: &ToyModel, batches: &[IntTensor]) -> Result<Vec<Tensor>> {
    let teacher = model.teacher();
    batches.iter().map(|b| teacher.logits(b, Phase::Float)).collect()
}

/// Pre-quantization values at the requested sites, one entry per batch.
fn collect_taps(
    model: &ToyModel,
    batches: &[IntTensor],
    phase: Phase,
    want: impl Fn(usize) -> bool,
) -> Result<Vec<Vec<Tensor>>> {
    let mut out = vec![Vec::new(); model.sites.len()];
    for b in batches {
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, b, phase)?;
        for (i, tap) in fw.taps.iter().enumerate() {
            if let (true, Some(v)) = (want(i), tap) {
                out[i].push(tape.value(*v).clone());
            }
        }
    }
    Ok(out)
}

fn method_for(mode: InitMode, class: TensorClass, bits: u32) -> (InitMethod, u32) {
    let policy = select_policy(class, bits);
    let method = match mode {
        InitMode::Policy => policy.method,
        InitMode::MaxMinLowBit if class == TensorClass::Rotated && bits <= 4 => InitMethod::MaxMin,
        InitMode::MaxMinLowBit => policy.method,
        InitMode::MaxMinEverywhere => InitMethod::MaxMin,
    };
    (method, policy.effective_bits(bits))
}

/// Sets every stage-one site from full-precision statistics.
pub fn initialize_stage_one(model: &mut ToyModel, batches: &[IntTensor], mode: InitMode) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let stage_one: Vec<bool> = model.sites.iter().map(|s| s.stage == Stage::One).collect();
    let taps = collect_taps(model, batches, Phase::Float, |i| stage_one[i])?;
    for (site, values) in model.sites.iter_mut().zip(taps) {
        if site.stage != Stage::One {
            continue;
        }
        let values = if site.id.role() == Role::LinearWeight { values[..1].to_vec() } else { values };
        let (method, bits) = method_for(mode, site.spec.tensor_class, site.spec.bits);
        site.spec = site.spec.with_bits(bits)?;
        let stats = stats_for(&values, &site.spec)?;
        site.params = init_from_stats(&stats, &site.spec, method)?;
        site.params.learnable = true;
        site.init_method = Some(method);
    }
    Ok(())
}

/// Sensitivity ratio of each layer's `down_proj` input under Max-Min at `probe_bits`,
/// measured on full-precision activations.
pub fn down_proj_sensitivity(model: &ToyModel, batches: &[IntTensor], probe_bits: u32) -> Result<Vec<SensitivityReport>> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let idx: Vec<usize> = (0..model.config.num_layers)
        .map(|l| model.site_index(crate::model::SiteId { layer: l, tap: Tap::DownIn }).expect("down_proj site"))
        .collect();
    let taps = collect_taps(model, batches, Phase::Float, |i| idx.contains(&i))?;
    idx.iter()
        .enumerate()
        .map(|(layer, &i)| {
            let parts: Vec<&Tensor> = taps[i].iter().collect();
            let x = Tensor::concat_rows(&parts)?;
            let spec = model.sites[i].spec.with_bits(probe_bits)?;
            Ok(SensitivityReport {
                site_index: layer,
                site: model.sites[i].id.label(),
                ratio: probe_sensitivity(&x, &spec)?,
                bits: probe_bits,
            })
        })
        .collect()
}

/// Assigns the planned bit-width to each layer's `down_proj` input.
pub fn apply_plan(model: &mut ToyModel, plan: &PrecisionPlan) -> Result<()> {
    for a in &plan.assignments {
        let site = model.site_mut(a.site_index, Tap::DownIn);
        site.spec = site.spec.with_bits(a.bits)?;
    }
    Ok(())
}

fn axis_of(g: Granularity) -> QuantAxis {
    match g {
        Granularity::PerTensor => QuantAxis::PerTensor,
        Granularity::PerChannel { axis } => QuantAxis::PerChannel(axis),
    }
}

/// Joint SGD over Cayley rotation parameters and stage-one scales against the
/// frozen teacher, with the local reconstruction loss on linear input
/// activations during warmup.
pub fn stage_one_optimize(
    model: &mut ToyModel,
    batches: &[IntTensor],
    teacher: &[Tensor],
    optim: &OptimConfig,
) -> Result<StageOneReport> {
    optim.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if teacher.len() != batches.len() {
        return Err(Error::Argument(format!("{} teacher outputs for {} batches", teacher.len(), batches.len())));
    }
    let mut trace = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let bi = step % batches.len();
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &batches[bi], Phase::StageOne)?;
        let target = tape.constant(teacher[bi].clone());
        let mse = tape.mse(fw.logits, target)?;
        let mut total = mse;
        let mut local_value = 0.0f64;
        if step < optim.warmup_local_loss_steps {
            for (i, site) in model.sites.iter().enumerate() {
                let (Some(x), Some(scale)) = (fw.taps[i], fw.scales[i]) else { continue };
                if site.id.role() != Role::LinearInputAct {
                    continue;
                }
                let xd = tape.detach(x);
                let fq = tape.fake_quant(xd, scale, None, site.spec.q_min(), site.spec.q_max(), axis_of(site.spec.granularity))?;
                let diff = tape.sub(fq, xd)?;
                let l = tape.sum_squares(diff);
                local_value += tape.value(l).data()[0] as f64;
                total = tape.add(total, l)?;
            }
        }
        let teacher_mse = tape.value(mse).data()[0] as f64;
        let total_value = tape.value(total).data()[0] as f64;
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(TraceEntry { step, teacher_mse, local_loss: local_value, total: total_value });
        let grads = tape.backward(total)?;
        let decay = optim.decay(step);

        let lr_rot = (optim.lr_rotation * decay) as f32;
        if lr_rot != 0.0 {
            for (theta, r) in [(fw.theta_r1, &mut model.r1), (fw.theta_r2, &mut model.r2)] {
                if let Some(v) = theta {
                    let g = grads.get(v);
                    for (p, gi) in r.theta.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr_rot * gi;
                    }
                }
            }
        }
        let lr_q = optim.lr_quant * decay;
        if lr_q != 0.0 {
            for (i, site) in model.sites.iter_mut().enumerate() {
                let Some(v) = fw.scales[i] else { continue };
                let x = tape.value(fw.taps[i].expect("quantized site has a tap"));
                let per_channel = x.len() / site.params.scale.len();
                let k = gradient_scale_factor(per_channel, site.spec.q_max())? as f64;
                let g = grads.get(v);
                for (s, gi) in site.params.scale.iter_mut().zip(g.data()) {
                    *s = ((*s as f64 - lr_q * k * *gi as f64) as f32).max(SCALE_FLOOR);
                }
            }
        }
    }
    Ok(StageOneReport { trace })
}

/// Max-Min calibration of stage-two sites on activations of the stage-one
/// quantized model. Rotations and stage-one params are left untouched.
pub fn stage_two_calibrate(model: &mut ToyModel, batches: &[IntTensor]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let stage_two: Vec<bool> = model.sites.iter().map(|s| s.stage == Stage::Two).collect();
    let taps = collect_taps(model, batches, Phase::StageOne, |i| stage_two[i])?;
    for (site, values) in model.sites.iter_mut().zip(taps) {
        if site.stage != Stage::Two {
            continue;
        }
        let policy = select_policy(TensorClass::Unrotated, site.spec.bits);
        site.spec = site.spec.with_bits(policy.effective_bits(site.spec.bits))?;
        let stats = values.iter().try_fold(RunningStats::new(), |acc, v| {
            stats_for(std::slice::from_ref(v), &site.spec).map(|s| acc.merge(&s[0]))
        })?;
        site.params = init_from_stats(&[stats], &site.spec, InitMethod::MaxMin)?;
        site.init_method = Some(InitMethod::MaxMin);
    }
    Ok(())
}

/// Mean squared logit error against the teacher over all batches.
pub fn teacher_mse(model: &ToyModel, batches: &[IntTensor], teacher: &[Tensor], phase: Phase) -> Result<f64> {
    if teacher.len() != batches.len() {
        return Err(Error::Argument(format!("{} teacher outputs for {} batches", teacher.len(), batches.len())));
    }
    let (mut sq, mut count) = (0.0f64, 0usize);
    for (b, t) in batches.iter().zip(teacher) {
        let logits = model.logits(b, phase)?;
        for (a, e) in logits.data().iter().zip(t.data()) {
            sq += ((*a - *e) as f64).powi(2);
        }
        count += logits.len();
    }
    Ok(if count > 0 { sq / count as f64 } else { 0.0 })
}

/// Output MSE of the fully quantized model against the teacher and the
/// relative error `‖fq(x) − x‖² / ‖x‖²` at each active site.
pub fn evaluate(model: &ToyModel, batches: &[IntTensor], teacher: &[Tensor]) -> Result<EvalReport> {
    if teacher.len() != batches.len() {
        return Err(Error::Argument(format!("{} teacher outputs for {} batches", teacher.len(), batches.len())));
    }
    let (mut sq, mut count) = (0.0f64, 0usize);
    let mut acc: Vec<Option<(ErrorDecomposition, f64)>> = vec![None; model.sites.len()];
    for (b, t) in batches.iter().zip(teacher) {
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, b, Phase::Full)?;
        let logits = tape.value(fw.logits);
        for (a, e) in logits.data().iter().zip(t.data()) {
            sq += ((*a - *e) as f64).powi(2);
        }
        count += logits.len();
        for (i, site) in model.sites.iter().enumerate() {
            if fw.scales[i].is_none() {
                continue;
            }
            let x = tape.value(fw.taps[i].expect("quantized site has a tap"));
            let d = error_decomposition(x, &site.params, &site.spec)?;
            let energy: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
            let slot = acc[i].get_or_insert((ErrorDecomposition { e_rounding: 0.0, e_clipping: 0.0, e_total: 0.0 }, 0.0));
            slot.0.e_rounding += d.e_rounding;
            slot.0.e_clipping += d.e_clipping;
            slot.0.e_total = slot.0.e_rounding + slot.0.e_clipping;
            slot.1 += energy;
        }
    }
    let per_site = model
        .sites
        .iter()
        .zip(acc)
        .filter_map(|(s, a)| {
            a.map(|(d, energy)| SiteError {
                site: s.id.label(),
                relative_error: if energy > 0.0 { d.e_total / energy } else { d.e_total },
                e_rounding: d.e_rounding,
                e_clipping: d.e_clipping,
            })
        })
        .collect();
    Ok(EvalReport { mse: if count > 0 { sq / count as f64 } else { 0.0 }, per_site })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub init_mode: InitMode,
    pub optim: OptimConfig,
    pub promote_fraction: f64,
    pub probe_bits: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { init_mode: InitMode::Policy, optim: OptimConfig::default(), promote_fraction: 0.10, probe_bits: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub sensitivity: Vec<SensitivityReport>,
    pub plan: PrecisionPlan,
    pub stage_one: StageOneReport,
    pub eval: EvalReport,
}

/// Full calibration: plan the `down_proj` bit-widths from fp activations,
/// initialize stage-one sites, optimize, calibrate stage two and evaluate on
/// the calibration batches.
pub fn run_pipeline(model: &mut ToyModel, batches: &[IntTensor], cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.optim.validate()?;
    let sensitivity = down_proj_sensitivity(model, batches, cfg.probe_bits)?;
    let plan = plan_mixed_precision(&sensitivity, cfg.promote_fraction)?;
    apply_plan(model, &plan)?;
    initialize_stage_one(model, batches, cfg.init_mode)?;
    let teacher = teacher_logits(model, batches)?;
    let stage_one = stage_one_optimize(model, batches, &teacher, &cfg.optim)?;
    stage_two_calibrate(model, batches)?;
    let eval = evaluate(model, batches, &teacher)?;
    Ok(PipelineOutcome { sensitivity, plan, stage_one, eval })
}
