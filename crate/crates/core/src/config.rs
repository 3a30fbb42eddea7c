//! Engine configuration as a JSON document. Every section and field is
//! optional and falls back to its default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::pillarizer::{FeatureConfig, GridConfig};
use crate::quant::CalibrationMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f32,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            top_k: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub grid: GridConfig,
    pub features: FeatureConfig,
    pub network: NetworkConfig,
    pub decode: DecodeConfig,
    pub calibration: CalibrationMode,
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EngineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.network.validate()?;
        if !(0.0..=1.0).contains(&self.decode.score_threshold) {
            return Err(Error::Config(format!("score_threshold {} outside [0, 1]", self.decode.score_threshold)));
        }
        if let CalibrationMode::Percentile(p) = self.calibration {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("calibration percentile {p} outside (0, 100]")));
            }
        }
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        self.features.num_features()
    }
}

/// JSON Schema describing the configuration document.
pub const CONFIG_SCHEMA: &str = include_str!("../config.schema.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(EngineConfig::from_json("{}").unwrap(), EngineConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = EngineConfig::from_json(r#"{"grid": {"pillar_size_x": 0.3, "pillar_size_y": 0.3}, "calibration": {"percentile": 99.9}}"#).unwrap();
        assert_eq!(cfg.grid.pillar_size_x, 0.3);
        assert_eq!(cfg.grid.x_min, -54.0);
        assert_eq!(cfg.calibration, CalibrationMode::Percentile(99.9));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(EngineConfig::from_json(r#"{"gird": {}}"#).is_err());
        assert!(EngineConfig::from_json(r#"{"grid": {"pillar_size": 0.2}}"#).is_err());
        assert!(EngineConfig::from_json(r#"{"network": {"stage_channel": [1]}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(EngineConfig::from_json(r#"{"decode": {"score_threshold": 2.0}}"#).is_err());
        assert!(EngineConfig::from_json(r#"{"calibration": {"percentile": 0}}"#).is_err());
        assert!(EngineConfig::from_json(r#"{"network": {"stage_depths": [1, 1]}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = EngineConfig::default();
        assert_eq!(EngineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn schema_is_json() {
        let v: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        assert_eq!(v["additionalProperties"], false);
    }
}
