//! Detector network: pillar encoder, four-stage sparse backbone,
//! multi-scale fusion on the stage-2 grid, center head and box decoding.

mod config;
mod dbpfn;
mod decode;
mod engine;
mod forward;
mod graph;
mod init;
mod io;
mod model;
mod plan;
mod quantized;

pub use config::{NetworkConfig, HEAD_STRIDE, NUSCENES_CLASSES, REG_CHANNELS};
pub use dbpfn::{dbpfn_encode, input_qparams, DbpfnParams, QuantEncoder};
pub use decode::{decode, sigmoid, DecodeParams, DetectionBox, LOG_SIZE_LIMIT};
pub use engine::{Detector, Inference, RunReport};
pub use forward::{forward_float, forward_float_observed, fuse_scales, run_backbone, run_head, FloatOutput, Observer};
pub use graph::{residual_count, GraphNode, OpKind, TraceEvent};
pub use init::{generate, identity_model, random_model};
pub use io::{detect_form, load_weights, model_from_file, model_to_file, quant_from_file, quant_to_file, LoadedWeights, WeightForm};
pub use model::{layer_name, random_sparse, relative_deviation, ConvLayer, HeadBranch, Model, Stage};
pub use plan::{ActivePlan, StagePlan};
pub use quantized::{calibrate_model, forward_int8, ActivationStats, QuantHeadBranch, QuantModel, QuantOutput, QuantStage};
