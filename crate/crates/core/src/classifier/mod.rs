//! Small feedforward classifier with batch normalization, hand-derived
//! backpropagation, a seeded training loop, and calibration measurement.

mod ece;
mod mlp;
mod train;

pub use ece::ece;
pub use mlp::{
    AttackLoss, BatchNorm, Cache, Checkpoint, Gradients, MlpClassifier, MlpConfig, Mode,
};
pub use train::{accuracy, train, EpochStats, OptimizerKind, TrainConfig};
