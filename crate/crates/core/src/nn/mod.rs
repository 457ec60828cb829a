//! Layers, losses and optimizers built on the gradient tape.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    avgpool3d, conv3d, cross_entropy_logits, dropout, layer_norm, linear, output_extent,
    Conv3dSpec, LAYER_NORM_EPS,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Bound, CheckpointManifest, Param, ParamId, ParamStore};
