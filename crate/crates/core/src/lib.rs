//! Self-supervised pre-training (contrastive, swapped-prediction and
//! self-distillation objectives) for an instance encoder, and attention-based
//! multiple instance learning on top of it, with exact gradients throughout.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod mil;
pub mod params;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
