//! Camera-based semantic scene completion at desk scale.
//!
//! The pipeline turns a stereo video clip of a synthetic scene into a dense
//! voxel grid of semantic labels: image encoding and semantic feature
//! fusion, depth estimation along two routes (monocular+binocular for
//! moving content, multi-frame temporal stereo for static structure),
//! lift-splat voxelization of both, attention-based fusion of the two
//! volumes, and a voxel classification head, trained end to end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corruption;
pub mod depth;
pub mod dsaf;
pub mod error;
pub mod lifting;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod semantic;
pub mod train;

pub use error::{Error, Result};

/// Shrunken run configuration shared by tests: quarter-size images and
/// grid so a full forward pass takes milliseconds.
pub fn small_test_config() -> config::ModelConfig {
    let mut cfg = config::ModelConfig::toy();
    cfg.grid.dims = [16, 16, 4];
    cfg.camera.width = 32;
    cfg.camera.height = 24;
    cfg.camera.cx = 16.0;
    cfg.camera.cy = 12.0;
    cfg.camera.fx = 30.0;
    cfg.camera.fy = 30.0;
    cfg.bins.count = 8;
    cfg.net.volume_channels = 16;
    cfg.net.n_frames = 2;
    cfg.attention.heads = 4;
    cfg.attention.window_k = 5;
    cfg.attention.n_self_layers = 1;
    cfg.attention.n_cross_layers = 1;
    cfg.train.scenes = 2;
    cfg.train.boxes_per_scene = 2;
    cfg.train.point_cap = 64;
    cfg
}
