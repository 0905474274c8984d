//! Minimal deterministic neural-network engine: batched conv / pool /
//! dense layers with reverse-mode gradients, SGD and Adam optimizers,
//! mean-squared-Euclidean loss, and checkpoint serialization.
//!
//! The engine is generic over the scalar type: training and inference run
//! in f32 (matching the checkpoint format), gradient verification runs the
//! same code in f64.

mod checkpoint;
mod layer;
mod model;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{Dense, Feat, Layer, LayerSpec, ParamMut, ParamRef};
pub use model::{
    default_backbone, init_dense, mse_loss_grad, ArchConfig, CoordScaler, DecoupledConfig,
    ModelConfig, Sequential,
};
pub use optim::{OptimSpec, Optimizer};

use ndarray::{LinalgScalar, ScalarOperand};

/// Scalar type the engine runs on. f32 for training, f64 for gradient
/// checking; both hit ndarray's fast matmul path.
pub trait Scalar:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
