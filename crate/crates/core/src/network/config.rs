use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression channels per site: offset x/y, z, log l/w/h, sin/cos yaw.
pub const REG_CHANNELS: usize = 8;

/// Stride of the stage-2 grid (where the head runs) relative to pillars.
pub const HEAD_STRIDE: u32 = 4;

pub const NUSCENES_CLASSES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Pillar encoder output width; the per-point MLP is half of it.
    pub encoder_out: usize,
    /// Batch normalization after the encoder's linear map.
    pub encoder_norm: bool,
    /// Width the stage-2 output is projected to before scale fusion.
    pub align_channels: usize,
    /// Hidden width of each head branch.
    pub head_channels: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![64, 64, 128, 128],
            stage_depths: vec![6, 12, 6, 6],
            encoder_out: 64,
            encoder_norm: true,
            align_channels: 128,
            head_channels: 64,
            num_classes: 10,
            class_names: NUSCENES_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl NetworkConfig {
    pub fn encoder_hidden(&self) -> usize {
        self.encoder_out / 2
    }

    /// Input and output width of stage `s` (0-based).
    pub fn stage_io(&self, s: usize) -> (usize, usize) {
        let cin = if s == 0 { self.encoder_out } else { self.stage_channels[s - 1] };
        (cin, self.stage_channels[s])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_depths.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 stages, got {} channel and {} depth entries",
                self.stage_channels.len(),
                self.stage_depths.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.encoder_out < 2 || self.encoder_out % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder_out {} must be even: max and min halves are concatenated",
                self.encoder_out
            )));
        }
        if self.stage_channels[2] != self.align_channels || self.stage_channels[3] != self.align_channels {
            return Err(Error::Config(format!(
                "stages 3 and 4 ({}, {}) must match align_channels {}",
                self.stage_channels[2], self.stage_channels[3], self.align_channels
            )));
        }
        if self.head_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("head_channels and num_classes must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}
