//! Trainable encoder, projection heads, optimizers, learning-rate schedules,
//! gradient accumulation and parameter checkpoints.

pub mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{
    checkpoint_hash, load_checkpoint_into, load_checkpoint_manifest, load_checkpoint_raw,
    save_checkpoint, CheckpointManifest,
};
pub use mlp::{Activation, HeadRole, Linear, Mlp, MlpCache, MlpConfig, ProjectionHead};
pub use optim::{
    GradAccumulator, LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState, ScheduleKind,
};

/// Default desk-scale encoder widths after the input layer.
pub const ENCODER_HIDDEN: &[usize] = &[256, 128];

/// Rectifier MLP `input → 256 → 128`.
pub fn default_encoder_config(input_dim: usize) -> MlpConfig {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(ENCODER_HIDDEN);
    MlpConfig::new(dims, Activation::Relu)
}
