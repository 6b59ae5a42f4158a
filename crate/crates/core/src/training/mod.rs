//! Losses, optimisation and the baseline / adversarial training loops.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{lr_at, DataConfig, DataFormat, ModelConfig, NamedDataset, Scheme, TrainConfig};
pub use loss::{compute_class_weights, pixel_cross_entropy, weighted_pixel_ce, ClassWeights};
pub use optim::{step_lr, Adam};
pub use trainer::{
    load_train_data, train_baseline, train_lntl, EpochLog, EvalSet, NamedLoss, TrainData, TrainOutcome, Trainer,
};
