//! JSON model configuration: the toy transformer shape, per-role bit-widths
//! and the rotation mode.

use crate::error::{Error, Result};
use crate::model::{RoleBits, RotationMode, ToyTransformerConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub bits: RoleBits,
    pub model: ToyTransformerConfig,
    pub rotation: RotationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { bits: RoleBits::default(), model: ToyTransformerConfig::default(), rotation: RotationMode::Learnable }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, b) in [
            ("bits.weight", self.bits.weight),
            ("bits.linear_input_act", self.bits.linear_input_act),
            ("bits.linear_output_act", self.bits.linear_output_act),
            ("bits.gate_output", self.bits.gate_output),
            ("bits.key", self.bits.key),
            ("bits.value", self.bits.value),
            ("bits.silu_output", self.bits.silu_output),
            ("bits.down_proj_input", self.bits.down_proj_input),
        ] {
            if !matches!(b, 4 | 8 | 16) {
                return Err(Error::Config(format!("{name} = {b} not in {{4, 8, 16}}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ModelConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Config(format!("{origin}: field `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ModelConfig::default();
        assert_eq!(ModelConfig::from_json(&c.to_json(), "t").unwrap(), c);
        assert_eq!(ModelConfig::from_json("{}", "t").unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = ModelConfig::from_json(r#"{"bits": {"weight": 8}, "model": {"num_layers": 3}}"#, "t").unwrap();
        assert_eq!(c.bits.weight, 8);
        assert_eq!(c.bits.linear_input_act, 8);
        assert_eq!(c.model.num_layers, 3);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let msg = |s: &str| ModelConfig::from_json(s, "cfg.json").unwrap_err().to_string();
        assert!(msg(r#"{"model": {"hidden_dim": "big"}}"#).contains("model.hidden_dim"));
        assert!(msg(r#"{"model": {"hiden_dim": 64}}"#).contains("hiden_dim"));
        assert!(msg(r#"{"bits": {"key": 5}}"#).contains("bits.key"));
        assert!(msg(r#"{"model": {"num_heads": 3}}"#).contains("num_heads"));
    }
}
