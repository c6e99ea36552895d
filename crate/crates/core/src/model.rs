//! Desk-scale decoder-only transformer with fused residual (`R1`) and per-head
//! (`R2`) rotations and a fake-quant insertion point at every quantized tensor.
//!
//! Linear weights are stored `[out, in]` and applied as `y = x Wᵀ`. With
//! rotations active the effective weights are
//!
//! ```text
//! q, k, up, gate : W R1          v : BDᵀ W R1        o : R1ᵀ W BD
//! down           : R1ᵀ W         embedding, lm_head : E R1
//! ```
//!
//! where `BD` is the block-diagonal stack of `R2`, one block per head.

use crate::error::{Error, Result};
use crate::init::InitMethod;
use crate::quant::{QuantParams, QuantSpec, TensorClass};
use crate::rotation::{randomized_hadamard, LearnableRotation, RotationHandle, RotationSite};
use crate::tape::{QuantAxis, Tape, Var};
use crate::tensor::{IntTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Layers whose `down_proj` input carries one channel scaled by `outlier_scale`.
    pub outlier_layers: Vec<usize>,
    pub outlier_scale: f32,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            mlp_dim: 256,
            num_layers: 2,
            vocab_size: 256,
            seq_len: 32,
            outlier_layers: vec![1],
            outlier_scale: 30.0,
        }
    }
}

impl ToyTransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if !self.hidden_dim.is_power_of_two() {
            return fail(format!("hidden_dim {} is not a power of two", self.hidden_dim));
        }
        if self.head_dim() < 2 || !self.head_dim().is_power_of_two() {
            return fail(format!("head_dim {} is not a power of two >= 2", self.head_dim()));
        }
        for (name, v) in [
            ("mlp_dim", self.mlp_dim),
            ("num_layers", self.num_layers),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if let Some(l) = self.outlier_layers.iter().find(|&&l| l >= self.num_layers) {
            return fail(format!("outlier layer {l} out of range for {} layers", self.num_layers));
        }
        if !(self.outlier_scale.is_finite() && self.outlier_scale > 0.0) {
            return fail(format!("outlier_scale {} must be positive", self.outlier_scale));
        }
        Ok(())
    }
}

/// Requested bit-width per tensor role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleBits {
    pub weight: u32,
    pub linear_input_act: u32,
    pub linear_output_act: u32,
    pub gate_output: u32,
    pub key: u32,
    pub value: u32,
    pub silu_output: u32,
    /// Low setting of the `down_proj` input plan; promoted sites get 16.
    pub down_proj_input: u32,
}

impl Default for RoleBits {
    fn default() -> Self {
        Self {
            weight: 4,
            linear_input_act: 8,
            linear_output_act: 8,
            gate_output: 16,
            key: 8,
            value: 8,
            silu_output: 16,
            down_proj_input: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// No rotation; every activation is treated as unrotated.
    None,
    /// Fixed randomized Hadamard `R1`/`R2`.
    Hadamard,
    /// Randomized Hadamard times a learnable Cayley factor.
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LinearInputAct,
    LinearWeight,
    LinearOutputAct,
    Key,
    Value,
    SiluOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
    Excluded,
}

/// Every quantizer position inside one decoder layer, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    AttnIn,
    QWeight,
    KWeight,
    VWeight,
    QOut,
    Key,
    Value,
    OIn,
    OWeight,
    OOut,
    MlpIn,
    UpWeight,
    GateWeight,
    UpOut,
    GateOut,
    SiluOut,
    DownIn,
    DownWeight,
    DownOut,
    HeadIn,
    HeadWeight,
}

pub const LAYER_TAPS: [Tap; 19] = [
    Tap::AttnIn,
    Tap::QWeight,
    Tap::KWeight,
    Tap::VWeight,
    Tap::QOut,
    Tap::Key,
    Tap::Value,
    Tap::OIn,
    Tap::OWeight,
    Tap::OOut,
    Tap::MlpIn,
    Tap::UpWeight,
    Tap::GateWeight,
    Tap::UpOut,
    Tap::GateOut,
    Tap::SiluOut,
    Tap::DownIn,
    Tap::DownWeight,
    Tap::DownOut,
];

impl Tap {
    pub fn name(self) -> &'static str {
        match self {
            Tap::AttnIn => "attn.input",
            Tap::QWeight => "q_proj.weight",
            Tap::KWeight => "k_proj.weight",
            Tap::VWeight => "v_proj.weight",
            Tap::QOut => "q_proj.output",
            Tap::Key => "k_proj.output",
            Tap::Value => "v_proj.output",
            Tap::OIn => "o_proj.input",
            Tap::OWeight => "o_proj.weight",
            Tap::OOut => "o_proj.output",
            Tap::MlpIn => "mlp.input",
            Tap::UpWeight => "up_proj.weight",
            Tap::GateWeight => "gate_proj.weight",
            Tap::UpOut => "up_proj.output",
            Tap::GateOut => "gate_proj.output",
            Tap::SiluOut => "silu.output",
            Tap::DownIn => "down_proj.input",
            Tap::DownWeight => "down_proj.weight",
            Tap::DownOut => "down_proj.output",
            Tap::HeadIn => "lm_head.input",
            Tap::HeadWeight => "lm_head.weight",
        }
    }

    pub fn role(self) -> Role {
        match self {
            Tap::AttnIn | Tap::OIn | Tap::MlpIn | Tap::DownIn | Tap::HeadIn => Role::LinearInputAct,
            Tap::QWeight
            | Tap::KWeight
            | Tap::VWeight
            | Tap::OWeight
            | Tap::UpWeight
            | Tap::GateWeight
            | Tap::DownWeight
            | Tap::HeadWeight => Role::LinearWeight,
            Tap::QOut | Tap::OOut | Tap::UpOut | Tap::GateOut | Tap::DownOut => Role::LinearOutputAct,
            Tap::Key => Role::Key,
            Tap::Value => Role::Value,
            Tap::SiluOut => Role::SiluOutput,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub tap: Tap,
}

impl SiteId {
    /// `layers.{l}.{tap}`, or `lm_head.*` for the head.
    pub fn label(&self) -> String {
        match self.tap {
            Tap::HeadIn | Tap::HeadWeight => self.tap.name().to_string(),
            t => format!("layers.{}.{}", self.layer, t.name()),
        }
    }

    pub fn role(&self) -> Role {
        self.tap.role()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSite {
    pub id: SiteId,
    pub spec: QuantSpec,
    pub params: QuantParams,
    pub stage: Stage,
    pub enabled: bool,
    pub init_method: Option<InitMethod>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub wup: Tensor,
    pub wgate: Tensor,
    pub wdown: Tensor,
}

/// Full-precision parameters before any rotation is fused.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedding: Tensor,
    pub lm_head: Tensor,
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyTransformerConfig,
    pub bits: RoleBits,
    pub rotation_mode: RotationMode,
    pub seed: u64,
    pub weights: Weights,
    pub r1: LearnableRotation,
    pub r2: LearnableRotation,
    pub sites: Vec<QuantSite>,
}

/// Which quantizers a forward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Float,
    /// Stage-one sites only; stage-two sites stay in full precision.
    StageOne,
    /// Every enabled, non-excluded site.
    Full,
}

/// Handles produced by one forward pass on a [`Tape`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Pre-quantization value at each site, indexed like `ToyModel::sites`.
    pub taps: Vec<Option<Var>>,
    /// Scale leaves of the quantizers the pass applied.
    pub scales: Vec<Option<Var>>,
    pub theta_r1: Option<Var>,
    pub theta_r2: Option<Var>,
}

struct Recorder {
    taps: Vec<Option<Var>>,
    scales: Vec<Option<Var>>,
}

fn gaussian(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Token embeddings with heavy-tailed rows: a Gaussian bulk, sparse large
/// entries, and one channel carrying a large constant offset.
fn embedding_table(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let massive = rng.random_range(0..dim);
    let mut t = gaussian(&[vocab, dim], 1.0, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % dim == massive {
            *v += 12.0;
        } else if rng.random_bool(0.02) {
            let z: f32 = StandardNormal.sample(rng);
            *v = 6.0 * z.signum() + z;
        }
    }
    t
}

fn rotation_seed(seed: u64, site: RotationSite) -> u64 {
    let tag = match site {
        RotationSite::R1 => 0x5231,
        RotationSite::R2 => 0x5232,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

impl ToyModel {
    /// Deterministic model from `seed`. Quantizer params start at scale 1 and
    /// are set by the pipeline's initialization.
    pub fn build(config: ToyTransformerConfig, bits: RoleBits, rotation_mode: RotationMode, seed: u64) -> Result<Self> {
        config.validate()?;
        for (name, b) in [
            ("weight", bits.weight),
            ("linear_input_act", bits.linear_input_act),
            ("linear_output_act", bits.linear_output_act),
            ("gate_output", bits.gate_output),
            ("key", bits.key),
            ("value", bits.value),
            ("silu_output", bits.silu_output),
            ("down_proj_input", bits.down_proj_input),
        ] {
            if !matches!(b, 4 | 8 | 16) {
                return Err(Error::Config(format!("bits.{name} = {b} not in {{4, 8, 16}}")));
            }
        }
        let (d, m) = (config.hidden_dim, config.mlp_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = embedding_table(config.vocab_size, d, &mut rng);
        let lm_head = gaussian(&[config.vocab_size, d], 1.0 / (d as f32).sqrt(), &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let sd = 1.0 / (d as f32).sqrt();
            let sm = 1.0 / (m as f32).sqrt();
            let mut w = LayerWeights {
                wq: gaussian(&[d, d], sd, &mut rng),
                wk: gaussian(&[d, d], sd, &mut rng),
                wv: gaussian(&[d, d], sd, &mut rng),
                wo: gaussian(&[d, d], sd * 0.5, &mut rng),
                wup: gaussian(&[m, d], sd, &mut rng),
                wgate: gaussian(&[m, d], sd, &mut rng),
                wdown: gaussian(&[d, m], sm * 0.5, &mut rng),
            };
            let ch = rng.random_range(0..m);
            if config.outlier_layers.contains(&l) {
                inject_outlier(&mut w, ch, config.outlier_scale)?;
            }
            layers.push(w);
        }
        let (r1, r2) = match rotation_mode {
            RotationMode::None => (
                LearnableRotation::new(RotationHandle::identity(d), RotationSite::R1, false),
                LearnableRotation::new(RotationHandle::identity(config.head_dim()), RotationSite::R2, false),
            ),
            RotationMode::Hadamard | RotationMode::Learnable => {
                let learn = rotation_mode == RotationMode::Learnable;
                (
                    LearnableRotation::new(
                        randomized_hadamard(d, rotation_seed(seed, RotationSite::R1))?,
                        RotationSite::R1,
                        learn,
                    ),
                    LearnableRotation::new(
                        randomized_hadamard(config.head_dim(), rotation_seed(seed, RotationSite::R2))?,
                        RotationSite::R2,
                        learn,
                    ),
                )
            }
        };
        let mut model = Self {
            weights: Weights { embedding, lm_head, layers },
            sites: Vec::new(),
            config,
            bits,
            rotation_mode,
            seed,
            r1,
            r2,
        };
        model.sites = model.default_sites()?;
        Ok(model)
    }

    fn site_spec(&self, id: SiteId) -> Result<QuantSpec> {
        let rotated = self.rotation_mode != RotationMode::None;
        let act_class = |r: bool| if r { TensorClass::Rotated } else { TensorClass::Unrotated };
        let b = &self.bits;
        match id.tap {
            Tap::AttnIn | Tap::OIn | Tap::MlpIn | Tap::HeadIn => {
                QuantSpec::symmetric_per_tensor(b.linear_input_act, act_class(rotated))
            }
            Tap::DownIn => QuantSpec::symmetric_per_tensor(b.down_proj_input, TensorClass::Unrotated),
            Tap::QWeight
            | Tap::KWeight
            | Tap::VWeight
            | Tap::OWeight
            | Tap::UpWeight
            | Tap::GateWeight
            | Tap::DownWeight
            | Tap::HeadWeight => QuantSpec::symmetric_per_channel(b.weight, 0, TensorClass::Rotated),
            Tap::QOut | Tap::OOut | Tap::UpOut | Tap::DownOut => {
                QuantSpec::symmetric_per_tensor(b.linear_output_act, TensorClass::Unrotated)
            }
            Tap::GateOut => QuantSpec::symmetric_per_tensor(b.gate_output, TensorClass::Unrotated),
            Tap::Key => QuantSpec::symmetric_per_tensor(b.key, TensorClass::Unrotated),
            Tap::Value => QuantSpec::symmetric_per_tensor(b.value, TensorClass::Unrotated),
            Tap::SiluOut => QuantSpec::symmetric_per_tensor(b.silu_output, TensorClass::Unrotated),
        }
    }

    fn default_sites(&self) -> Result<Vec<QuantSite>> {
        let mut ids: Vec<SiteId> = (0..self.config.num_layers)
            .flat_map(|layer| LAYER_TAPS.iter().map(move |&tap| SiteId { layer, tap }))
            .collect();
        let l = self.config.num_layers;
        ids.push(SiteId { layer: l, tap: Tap::HeadIn });
        ids.push(SiteId { layer: l, tap: Tap::HeadWeight });
        ids.into_iter()
            .map(|id| {
                let spec = self.site_spec(id)?;
                let stage = match (id.tap, id.role()) {
                    (Tap::HeadIn | Tap::HeadWeight, _) => Stage::Excluded,
                    (_, Role::LinearInputAct | Role::LinearWeight) => Stage::One,
                    _ => Stage::Two,
                };
                let channels = match id.tap.role() {
                    Role::LinearWeight => self.weight_rows(id),
                    _ => 1,
                };
                Ok(QuantSite {
                    id,
                    spec,
                    params: QuantParams { scale: vec![1.0; channels], zero_point: vec![0; channels], learnable: false },
                    stage,
                    enabled: stage != Stage::Excluded,
                    init_method: None,
                })
            })
            .collect()
    }

    fn weight_rows(&self, id: SiteId) -> usize {
        let c = &self.config;
        match id.tap {
            Tap::UpWeight | Tap::GateWeight => c.mlp_dim,
            Tap::HeadWeight => c.vocab_size,
            _ => c.hidden_dim,
        }
    }

    pub fn site_index(&self, id: SiteId) -> Option<usize> {
        match id.tap {
            Tap::HeadIn if id.layer == self.config.num_layers => Some(self.sites.len() - 2),
            Tap::HeadWeight if id.layer == self.config.num_layers => Some(self.sites.len() - 1),
            Tap::HeadIn | Tap::HeadWeight => None,
            t if id.layer < self.config.num_layers => {
                LAYER_TAPS.iter().position(|&x| x == t).map(|p| id.layer * LAYER_TAPS.len() + p)
            }
            _ => None,
        }
    }

    pub fn site(&self, layer: usize, tap: Tap) -> &QuantSite {
        &self.sites[self.site_index(SiteId { layer, tap }).expect("valid site")]
    }

    pub fn site_mut(&mut self, layer: usize, tap: Tap) -> &mut QuantSite {
        let i = self.site_index(SiteId { layer, tap }).expect("valid site");
        &mut self.sites[i]
    }

    pub fn set_quantizers_enabled(&mut self, enabled: bool) {
        for s in &mut self.sites {
            s.enabled = enabled && s.stage != Stage::Excluded;
        }
    }

    /// Digest of the params of all sites in `stage`.
    pub fn stage_checksum(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for s in self.sites.iter().filter(|s| s.stage == stage) {
            h.update(s.id.label().as_bytes());
            h.update([s.spec.bits as u8]);
            for v in &s.params.scale {
                h.update(v.to_le_bytes());
            }
            for z in &s.params.zero_point {
                h.update(z.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of both rotations' parameters and matrices.
    pub fn rotation_checksum(&self) -> String {
        let mut h = Sha256::new();
        for r in [&self.r1, &self.r2] {
            for v in r.theta.data().iter().chain(r.base.matrix.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn active(&self, i: usize, phase: Phase) -> bool {
        let s = &self.sites[i];
        s.enabled
            && match phase {
                Phase::Float => false,
                Phase::StageOne => s.stage == Stage::One,
                Phase::Full => s.stage != Stage::Excluded,
            }
    }

    fn rotation_var(&self, tape: &mut Tape, r: &LearnableRotation) -> Result<(Var, Option<Var>)> {
        if !r.learnable {
            return Ok((tape.constant(r.base.matrix.clone()), None));
        }
        let base = tape.constant(r.base.matrix.clone());
        let theta = tape.leaf(r.theta.clone());
        let c = tape.cayley(theta, r.size())?;
        Ok((tape.matmul(base, c)?, Some(theta)))
    }

    /// Forward pass of a `[batch × seq_len]` token block. Logits are `[batch·seq_len × vocab]`.
    pub fn forward(&self, tape: &mut Tape, tokens: &IntTensor, phase: Phase) -> Result<Forward> {
        let (b, t) = match tokens.shape() {
            [b, t] => (*b, *t),
            s => return Err(Error::Dimension(format!("token block must be 2-D, got {s:?}"))),
        };
        let c = &self.config;
        let (d, hd, heads) = (c.hidden_dim, c.head_dim(), c.num_heads);
        if let Some(&bad) = tokens.data().iter().find(|&&v| v < 0 || v as usize >= c.vocab_size) {
            return Err(Error::Argument(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let mut fw = Recorder { taps: vec![None; self.sites.len()], scales: vec![None; self.sites.len()] };
        let (r1, theta_r1) = self.rotation_var(tape, &self.r1)?;
        let (r2, theta_r2) = self.rotation_var(tape, &self.r2)?;
        let r1t = tape.transpose(r1)?;
        let bd = tape.block_diag(r2, heads)?;
        let bdt = tape.transpose(bd)?;

        let mut rows = Vec::with_capacity(b * t * d);
        for &tok in tokens.data() {
            let at = tok as usize * d;
            rows.extend_from_slice(&self.weights.embedding.data()[at..at + d]);
        }
        let emb = tape.constant(Tensor::new(vec![b * t, d], rows)?);
        let mut h = tape.matmul(emb, r1)?;
        let inv_sqrt = 1.0 / (hd as f32).sqrt();

        for (l, w) in self.weights.layers.iter().enumerate() {
            let q = |tape: &mut Tape, fw: &mut Recorder, tap: Tap, x: Var| self.quant(tape, fw, l, tap, x, phase);
            let into = |tape: &mut Tape, wt: &Tensor, r: Var| -> Result<Var> {
                let wv = tape.constant(wt.clone());
                tape.matmul(wv, r)
            };
            let wq = into(tape, &w.wq, r1)?;
            let wk = into(tape, &w.wk, r1)?;
            let wv_raw = into(tape, &w.wv, r1)?;
            let wv = tape.matmul(bdt, wv_raw)?;
            let wo_raw = tape.constant(w.wo.clone());
            let wo_l = tape.matmul(r1t, wo_raw)?;
            let wo = tape.matmul(wo_l, bd)?;
            let wup = into(tape, &w.wup, r1)?;
            let wgate = into(tape, &w.wgate, r1)?;
            let wdown_raw = tape.constant(w.wdown.clone());
            let wdown = tape.matmul(r1t, wdown_raw)?;

            let x = tape.rms_norm(h, RMS_EPS)?;
            let x = q(tape, &mut fw, Tap::AttnIn, x)?;
            let wq = q(tape, &mut fw, Tap::QWeight, wq)?;
            let wk = q(tape, &mut fw, Tap::KWeight, wk)?;
            let wv = q(tape, &mut fw, Tap::VWeight, wv)?;
            let qo = tape.matmul_nt(x, wq)?;
            let qo = q(tape, &mut fw, Tap::QOut, qo)?;
            let ko = tape.matmul_nt(x, wk)?;
            let ko = q(tape, &mut fw, Tap::Key, ko)?;
            let vo = tape.matmul_nt(x, wv)?;
            let vo = q(tape, &mut fw, Tap::Value, vo)?;

            let mut seqs = Vec::with_capacity(b);
            for s in 0..b {
                let qs = tape.slice_rows(qo, s * t, t)?;
                let ks = tape.slice_rows(ko, s * t, t)?;
                let vs = tape.slice_rows(vo, s * t, t)?;
                let mut outs = Vec::with_capacity(heads);
                for hh in 0..heads {
                    let qh = tape.slice_cols(qs, hh * hd, hd)?;
                    let kh = tape.slice_cols(ks, hh * hd, hd)?;
                    let vh = tape.slice_cols(vs, hh * hd, hd)?;
                    let sc = tape.matmul_nt(qh, kh)?;
                    let sc = tape.scale(sc, inv_sqrt);
                    let p = tape.softmax_rows(sc, true)?;
                    outs.push(tape.matmul(p, vh)?);
                }
                seqs.push(tape.concat_cols(&outs)?);
            }
            let attn = tape.concat_rows(&seqs)?;
            let attn = q(tape, &mut fw, Tap::OIn, attn)?;
            let wo = q(tape, &mut fw, Tap::OWeight, wo)?;
            let o = tape.matmul_nt(attn, wo)?;
            let o = q(tape, &mut fw, Tap::OOut, o)?;
            h = tape.add(h, o)?;

            let x = tape.rms_norm(h, RMS_EPS)?;
            let x = q(tape, &mut fw, Tap::MlpIn, x)?;
            let wup = q(tape, &mut fw, Tap::UpWeight, wup)?;
            let wgate = q(tape, &mut fw, Tap::GateWeight, wgate)?;
            let up = tape.matmul_nt(x, wup)?;
            let up = q(tape, &mut fw, Tap::UpOut, up)?;
            let gate = tape.matmul_nt(x, wgate)?;
            let gate = q(tape, &mut fw, Tap::GateOut, gate)?;
            let act = tape.silu(gate);
            let act = q(tape, &mut fw, Tap::SiluOut, act)?;
            let mid = tape.mul(act, up)?;
            let mid = q(tape, &mut fw, Tap::DownIn, mid)?;
            let wdown = q(tape, &mut fw, Tap::DownWeight, wdown)?;
            let down = tape.matmul_nt(mid, wdown)?;
            let down = q(tape, &mut fw, Tap::DownOut, down)?;
            h = tape.add(h, down)?;
        }
        let x = tape.rms_norm(h, RMS_EPS)?;
        let head_layer = c.num_layers;
        let x = self.quant(tape, &mut fw, head_layer, Tap::HeadIn, x, phase)?;
        let head_raw = tape.constant(self.weights.lm_head.clone());
        let head = tape.matmul(head_raw, r1)?;
        let head = self.quant(tape, &mut fw, head_layer, Tap::HeadWeight, head, phase)?;
        let logits = tape.matmul_nt(x, head)?;
        Ok(Forward { logits, taps: fw.taps, scales: fw.scales, theta_r1, theta_r2 })
    }

    fn quant(&self, tape: &mut Tape, fw: &mut Recorder, layer: usize, tap: Tap, x: Var, phase: Phase) -> Result<Var> {
        let i = self.site_index(SiteId { layer, tap }).expect("forward visits known sites");
        fw.taps[i] = Some(x);
        if !self.active(i, phase) {
            return Ok(x);
        }
        let site = &self.sites[i];
        let scale = tape.leaf(Tensor::from_vec(site.params.scale.clone())?);
        let zp = if site.params.zero_point.iter().any(|&z| z != 0) {
            Some(tape.leaf(Tensor::from_vec(site.params.zero_point.iter().map(|&z| z as f32).collect())?))
        } else {
            None
        };
        let axis = match site.spec.granularity {
            crate::quant::Granularity::PerTensor => QuantAxis::PerTensor,
            crate::quant::Granularity::PerChannel { axis } => QuantAxis::PerChannel(axis),
        };
        fw.scales[i] = Some(scale);
        tape.fake_quant(x, scale, zp, site.spec.q_min(), site.spec.q_max(), axis)
    }

    /// Logits of a token block without building gradients for later use.
    pub fn logits(&self, tokens: &IntTensor, phase: Phase) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, tokens, phase)?;
        Ok(tape.value(fw.logits).clone())
    }

    /// Copy with identity rotations and no quantizers; the frozen fp32 teacher.
    pub fn teacher(&self) -> ToyModel {
        let mut t = self.clone();
        t.r1 = LearnableRotation::new(RotationHandle::identity(self.config.hidden_dim), RotationSite::R1, false);
        t.r2 = LearnableRotation::new(RotationHandle::identity(self.config.head_dim()), RotationSite::R2, false);
        t.rotation_mode = RotationMode::None;
        t.set_quantizers_enabled(false);
        t
    }
}

fn inject_outlier(w: &mut LayerWeights, channel: usize, k: f32) -> Result<()> {
    let d = w.wdown.shape()[0];
    let m = w.wup.shape()[0];
    let row = &mut w.wup.data_mut()[channel * d..(channel + 1) * d];
    row.iter_mut().for_each(|v| *v *= k);
    for r in 0..d {
        w.wdown.data_mut()[r * m + channel] /= k;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::token_sequences;

    fn small() -> ToyTransformerConfig {
        ToyTransformerConfig { seq_len: 8, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(ToyTransformerConfig::default().validate().is_ok());
        for bad in [
            ToyTransformerConfig { num_heads: 3, ..Default::default() },
            ToyTransformerConfig { hidden_dim: 48, num_heads: 4, ..Default::default() },
            ToyTransformerConfig { hidden_dim: 64, num_heads: 64, ..Default::default() },
            ToyTransformerConfig { outlier_layers: vec![5], ..Default::default() },
            ToyTransformerConfig { num_layers: 0, outlier_layers: vec![], ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = ToyModel::build(small(), RoleBits::default(), RotationMode::Learnable, 7).unwrap();
        let b = ToyModel::build(small(), RoleBits::default(), RotationMode::Learnable, 7).unwrap();
        assert_eq!(a, b);
        let c = ToyModel::build(small(), RoleBits::default(), RotationMode::Learnable, 8).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn site_layout() {
        let m = ToyModel::build(small(), RoleBits::default(), RotationMode::Hadamard, 0).unwrap();
        assert_eq!(m.sites.len(), 2 * LAYER_TAPS.len() + 2);
        for (i, s) in m.sites.iter().enumerate() {
            assert_eq!(m.site_index(s.id), Some(i));
            if s.stage == Stage::One {
                assert!(matches!(s.id.role(), Role::LinearInputAct | Role::LinearWeight));
            }
        }
        assert_eq!(m.site(0, Tap::DownIn).spec.tensor_class, TensorClass::Unrotated);
        assert_eq!(m.site(1, Tap::Key).spec.bits, 8);
        assert_eq!(m.site(1, Tap::SiluOut).spec.bits, 16);
        assert_eq!(m.sites[m.sites.len() - 1].stage, Stage::Excluded);
        assert_eq!(m.site(0, Tap::UpWeight).params.scale.len(), 256);
    }

    #[test]
    fn fused_rotations_preserve_float_output() {
        let tokens = token_sequences(2, 8, 256, 3);
        let rotated = ToyModel::build(small(), RoleBits::default(), RotationMode::Hadamard, 1).unwrap();
        let plain = rotated.teacher();
        let a = rotated.logits(&tokens, Phase::Float).unwrap();
        let b = plain.logits(&tokens, Phase::Float).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-4, "{}", a.max_abs_diff(&b).unwrap());
    }

    #[test]
    fn disabled_quantizers_match_float_exactly() {
        let tokens = token_sequences(2, 8, 256, 4);
        let mut m = ToyModel::build(small(), RoleBits::default(), RotationMode::Learnable, 2).unwrap();
        m.set_quantizers_enabled(false);
        assert_eq!(m.logits(&tokens, Phase::Full).unwrap(), m.logits(&tokens, Phase::Float).unwrap());
    }

    #[test]
    fn outlier_injection_keeps_float_function() {
        let tokens = token_sequences(1, 8, 256, 5);
        let with = ToyModel::build(small(), RoleBits::default(), RotationMode::None, 9).unwrap();
        let without = ToyModel::build(
            ToyTransformerConfig { outlier_layers: vec![], ..small() },
            RoleBits::default(),
            RotationMode::None,
            9,
        )
        .unwrap();
        let a = with.logits(&tokens, Phase::Float).unwrap();
        let b = without.logits(&tokens, Phase::Float).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-3);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let m = ToyModel::build(small(), RoleBits::default(), RotationMode::None, 0).unwrap();
        let bad = IntTensor::new(vec![1, 2], vec![0, 256]).unwrap();
        assert!(matches!(m.logits(&bad, Phase::Float), Err(Error::Argument(_))));
    }
}
