//! Calibration manifest: every quantizer's spec and params, the rotations, the
//! precision plan and the provenance needed to rebuild and re-evaluate the
//! model. Serialized as JSON with object keys in sorted order.

use crate::error::{Error, Result};
use crate::init::InitMethod;
use crate::io::config::ModelConfig;
use crate::model::{Role, Stage, Tap, ToyModel};
use crate::pipeline::PipelineConfig;
use crate::quant::{Granularity, QuantParams, QuantSpec, TensorClass};
use crate::rotation::{LearnableRotation, RotationKind, RotationSite};
use crate::sensitivity::PrecisionPlan;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes each `f32` through its shortest decimal form so the JSON stays
/// readable; parsing it back yields the same bits.
fn short_f32s<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| format!("{x}").parse::<f64>().expect("float formats")))
}

fn short_opt_f32s<S: Serializer>(v: &Option<Vec<f32>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => short_f32s(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { num_seqs: usize, seq_len: usize, seed: u64 },
    File { path: String, sha256: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationEntry {
    pub site: RotationSite,
    pub kind: RotationKind,
    pub size: usize,
    pub seed: Option<u64>,
    #[serde(serialize_with = "short_opt_f32s")]
    pub cayley_params: Option<Vec<f32>>,
    /// SHA-256 of the rotation matrix, little-endian `f32` row-major.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub site: String,
    pub layer: usize,
    pub tap: Tap,
    pub role: Role,
    pub stage: Stage,
    pub enabled: bool,
    pub bits: u32,
    pub granularity: Granularity,
    pub symmetric: bool,
    pub signed: bool,
    pub tensor_class: TensorClass,
    pub init_method: Option<InitMethod>,
    #[serde(serialize_with = "short_f32s")]
    pub scale: Vec<f32>,
    pub zero_point: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub pipeline: PipelineConfig,
    pub data: DataSource,
    pub rotations: Vec<RotationEntry>,
    pub precision_plan: PrecisionPlan,
    pub sites: Vec<SiteEntry>,
    /// Output MSE against the fp32 teacher on the calibration data.
    pub eval_mse: f64,
}

pub fn matrix_digest(m: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn rotation_entry(r: &LearnableRotation) -> Result<RotationEntry> {
    let handle = r.handle()?;
    Ok(RotationEntry {
        site: r.site,
        kind: handle.kind,
        size: r.size(),
        seed: handle.seed,
        cayley_params: handle.cayley_params.map(|t| t.into_data()),
        digest: matrix_digest(&handle.matrix),
    })
}

impl CalibrationManifest {
    pub fn capture(
        model: &ToyModel,
        pipeline: &PipelineConfig,
        data: DataSource,
        precision_plan: &PrecisionPlan,
        eval_mse: f64,
    ) -> Result<Self> {
        let sites = model
            .sites
            .iter()
            .map(|s| SiteEntry {
                site: s.id.label(),
                layer: s.id.layer,
                tap: s.id.tap,
                role: s.id.role(),
                stage: s.stage,
                enabled: s.enabled,
                bits: s.spec.bits,
                granularity: s.spec.granularity,
                symmetric: s.spec.symmetric,
                signed: s.spec.signed,
                tensor_class: s.spec.tensor_class,
                init_method: s.init_method,
                scale: s.params.scale.clone(),
                zero_point: s.params.zero_point.clone(),
            })
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            seed: model.seed,
            config: ModelConfig { bits: model.bits, model: model.config.clone(), rotation: model.rotation_mode },
            pipeline: pipeline.clone(),
            data,
            rotations: vec![rotation_entry(&model.r1)?, rotation_entry(&model.r2)?],
            precision_plan: precision_plan.clone(),
            sites,
            eval_mse,
        })
    }

    /// Rebuilds the calibrated model from its config and seed and loads every
    /// site and rotation. Fails on any structural mismatch.
    pub fn restore(&self) -> Result<ToyModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported format_version {}", self.format_version)));
        }
        let mut model =
            ToyModel::build(self.config.model.clone(), self.config.bits, self.config.rotation, self.seed)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn apply(&self, model: &mut ToyModel) -> Result<()> {
        if self.sites.len() != model.sites.len() {
            return Err(Error::Manifest(format!(
                "manifest has {} sites, model has {}",
                self.sites.len(),
                model.sites.len()
            )));
        }
        for (i, (entry, site)) in self.sites.iter().zip(model.sites.iter_mut()).enumerate() {
            let label = site.id.label();
            if entry.site != label || entry.layer != site.id.layer || entry.tap != site.id.tap {
                return Err(Error::Manifest(format!("sites[{i}]: expected {label}, found {}", entry.site)));
            }
            if entry.role != site.id.role() || entry.stage != site.stage {
                return Err(Error::Manifest(format!("sites[{i}] ({label}): role or stage differs from the model")));
            }
            let spec = QuantSpec::new(entry.bits, entry.symmetric, entry.granularity, entry.signed, entry.tensor_class)
                .map_err(|e| Error::Manifest(format!("sites[{i}] ({label}): {e}")))?;
            let params = QuantParams { scale: entry.scale.clone(), zero_point: entry.zero_point.clone(), learnable: site.params.learnable };
            if params.num_channels() != site.params.num_channels() {
                return Err(Error::Manifest(format!(
                    "sites[{i}] ({label}): {} channels, model expects {}",
                    params.num_channels(),
                    site.params.num_channels()
                )));
            }
            params.validate(&spec).map_err(|e| Error::Manifest(format!("sites[{i}] ({label}): {e}")))?;
            site.spec = spec;
            site.params = QuantParams { learnable: site.stage == Stage::One && entry.init_method.is_some(), ..params };
            site.enabled = entry.enabled;
            site.init_method = entry.init_method;
        }
        if self.rotations.len() != 2 {
            return Err(Error::Manifest(format!("expected 2 rotations, found {}", self.rotations.len())));
        }
        for entry in &self.rotations {
            let r = match entry.site {
                RotationSite::R1 => &mut model.r1,
                RotationSite::R2 => &mut model.r2,
            };
            if entry.size != r.size() {
                return Err(Error::Manifest(format!("rotation {:?}: size {} vs model {}", entry.site, entry.size, r.size())));
            }
            match (&entry.cayley_params, r.learnable) {
                (Some(theta), true) => {
                    if theta.len() != r.theta.len() {
                        return Err(Error::Manifest(format!("rotation {:?}: {} cayley params", entry.site, theta.len())));
                    }
                    r.theta = Tensor::from_vec(theta.clone())?;
                }
                (None, false) => {}
                _ => return Err(Error::Manifest(format!("rotation {:?}: learnability differs from the model", entry.site))),
            }
            let digest = matrix_digest(&r.matrix()?);
            if digest != entry.digest {
                return Err(Error::Manifest(format!("rotation {:?}: matrix digest mismatch", entry.site)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("manifest serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Manifest(format!("{origin}: field `{}`: {}", e.path(), e.inner())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }
}
