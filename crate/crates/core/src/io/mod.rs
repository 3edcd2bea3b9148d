//! Checkpoints, run configuration and manifests.

mod checkpoint;
mod config;
mod manifest;

pub use checkpoint::{
    backbone_checkpoint, backbone_from_checkpoint, load_backbone, load_planner, planner_checkpoint,
    planner_from_checkpoint, save_backbone, save_planner, Checkpoint, TensorBlock, CHECKPOINT_MAGIC,
};
pub use config::*;
pub use manifest::{file_digest, FileDigest, Manifest};
