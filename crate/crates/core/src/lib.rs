//! Fully sparse, INT8-capable pillar detector for LiDAR point clouds.
//!
//! The crate is organised the way data flows through the detector:
//!
//! - [`pcd_io`] reads raw clouds and writes JSON-lines detections.
//! - [`pillarizer`] bins points into a 2D pillar grid and builds per-point
//!   features, splitting every coordinate into a coarse and a detail part so
//!   both fit 8-bit quantization.
//! - [`quant`] holds the affine INT8 scheme and fixed-point requantization.
//! - [`sparse`] implements 2D sparse tensors, rulebooks and the convolution
//!   flavours (submanifold, regular, strided) plus fusion and pooling ops.
//! - [`reparam`] folds three-branch training convolutions into one kernel.
//! - [`network`] wires the pillar encoder, backbone, multi-scale fusion,
//!   sparse center head and box decoding, in float and INT8.
//! - [`analysis`] counts MACs and sizes Im2Col line buffers.
//! - [`weights`] and [`config`] define the on-disk weight and config formats.

pub mod analysis;
pub mod config;
pub mod error;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod network;
pub mod pcd_io;
pub mod pillarizer;
pub mod quant;
pub mod reparam;
pub mod sparse;
pub mod synth;
pub mod weights;

pub use error::{Error, Result};
