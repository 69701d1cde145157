//! Radar-camera fusion 3D object detection at desk scale.
//!
//! The crate implements the full pipeline as a library: a synthetic scene
//! simulator standing in for a drive log, a pillar encoder for radar
//! returns, a BEV encoder that fuses camera and radar features with
//! radar-guided attention and sigmoid gating, a center-based detection
//! head, a radar-grid refinement stage over per-box point sets, nuScenes
//! style evaluation, and a small reverse-mode autodiff tape everything
//! differentiable is built on. All computation is fp64 and deterministic:
//! identical configs and seeds reproduce results bit for bit, including
//! under scene-level parallelism.

pub mod bev;
pub mod camera;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod radar;
pub mod refine;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
