//! Dense RGB-D SLAM on a hybrid scene representation: a sparse voxel field of
//! trainable TSDF embeddings (seeded from depth, fused across frames) plus
//! tri-plane appearance features, decoded by small MLPs and optimized through
//! a differentiable depth-guided volume renderer.
//!
//! The crate is organized bottom-up:
//! - [`diffcore`]: reverse-mode autodiff over flat parameter groups + Adam
//! - [`frame_io`]: datasets, intrinsics, back-projection, pixel sampling
//! - [`sparse_volume`] / [`triplane`] / [`decoders`]: the scene representation
//! - [`renderer`] / [`objective`]: ray sampling, SDF-weighted rendering, losses
//! - [`tracker`] / [`mapper`]: per-frame pose tracking and joint refinement
//! - [`mesher`] / [`evaluator`] / [`synth`]: mesh extraction, metrics, data
//! - [`pipeline`]: the sequential engine the CLI drives

pub mod config;
pub mod decoders;
pub mod diffcore;
pub mod error;
pub mod evaluator;
pub mod frame_io;
pub mod geom;
pub mod hash;
pub mod mapper;
pub mod mesher;
pub mod objective;
pub mod pipeline;
pub mod pose;
pub mod real;
pub mod renderer;
pub mod scene;
pub mod sparse_volume;
pub mod synth;
pub mod tracker;
pub mod triplane;

pub use error::{Error, Result};
pub use real::Real;
