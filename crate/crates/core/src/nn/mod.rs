//! Dense ReLU networks trained from scratch.
//!
//! Parameters are stored as `f32`. The same code is generic over [`Scalar`] so
//! gradient verification can run an `f64` copy of a model, which is what makes
//! central differences meaningful.

mod adam;
mod checkpoint;
mod gradcheck;
mod loss;
mod mlp;
mod train;

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use loss::{mse_loss, Loss, LossValue};
pub use mlp::{Gradients, Layer, Mlp, MlpSpec, Tape};
pub use train::{fit, fit_from, EpochLoss, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("tape does not match model: {0}")]
    TapeMismatch(String),
    #[error("length mismatch: predictions {pred}, targets {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("loss over an empty batch")]
    Empty,
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: std::path::PathBuf, detail: String },
}

/// Floating-point element type of a network.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
