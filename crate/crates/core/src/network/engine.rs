use std::time::{Duration, Instant};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::pcd_io::PointCloud;
use crate::pillarizer::{pillarize, FeatureConfig, GridConfig, PillarSet};

use super::decode::{decode, DecodeParams, DetectionBox};
use super::forward::forward_float;
use super::io::LoadedWeights;
use super::quantized::forward_int8;

/// Per-frame counters reported alongside detections.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub points_in: usize,
    pub points_kept: usize,
    pub pillars: usize,
    pub stage_active: Vec<usize>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub boxes: Vec<DetectionBox>,
    pub report: RunReport,
}

/// Immutable engine: shareable across threads, one call per frame.
#[derive(Debug, Clone)]
pub struct Detector {
    grid: GridConfig,
    features: FeatureConfig,
    decode: DecodeParams,
    weights: LoadedWeights,
}

impl Detector {
    pub fn new(cfg: &EngineConfig, weights: LoadedWeights) -> Result<Self> {
        cfg.validate()?;
        match &weights {
            LoadedWeights::Float(m) => {
                m.validate()?;
                if m.config != cfg.network {
                    return Err(Error::Config("weights were built for a different network config".into()));
                }
                if m.encoder.in_features != cfg.in_features() {
                    return Err(Error::Config(format!(
                        "weights take {} input features, config produces {}",
                        m.encoder.in_features,
                        cfg.in_features()
                    )));
                }
            }
            LoadedWeights::Int8(q) => {
                q.validate()?;
                if q.config != cfg.network {
                    return Err(Error::Config("weights were built for a different network config".into()));
                }
                if q.encoder.in_features() != cfg.in_features() {
                    return Err(Error::Config("int8 weights take a different number of input features".into()));
                }
            }
        }
        Ok(Self {
            grid: cfg.grid.clone(),
            features: cfg.features.clone(),
            decode: DecodeParams::new(&cfg.grid, &cfg.network, cfg.decode.score_threshold, cfg.decode.top_k),
            weights,
        })
    }

    pub fn is_int8(&self) -> bool {
        matches!(self.weights, LoadedWeights::Int8(_))
    }

    pub fn pillarize(&self, cloud: &PointCloud) -> Result<PillarSet> {
        pillarize(cloud, &self.grid, &self.features)
    }

    pub fn detect(&self, cloud: &PointCloud) -> Result<Inference> {
        let start = Instant::now();
        let pillars = self.pillarize(cloud)?;
        let (boxes, stage_active) = match &self.weights {
            LoadedWeights::Float(m) => {
                let out = forward_float(m, &pillars)?;
                (decode(&out.heatmap, &out.regression, &self.decode)?, out.stage_active)
            }
            LoadedWeights::Int8(q) => {
                let out = forward_int8(q, &pillars)?;
                let hm = out.heatmap.dequantize();
                let reg = out.regression.dequantize();
                (decode(&hm, &reg, &self.decode)?, out.stage_active)
            }
        };
        Ok(Inference {
            boxes,
            report: RunReport {
                points_in: cloud.len(),
                points_kept: pillars.num_points(),
                pillars: pillars.len(),
                stage_active,
                elapsed: start.elapsed(),
            },
        })
    }
}
