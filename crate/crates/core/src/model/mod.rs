//! Classifiers whose logits are the class scores being explained: the MNIST
//! CNN and a linear probe, with training and checkpointing.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use net::{Model, ModelSpec, INPUT, LOSS, TARGETS};
pub use train::{
    evaluate_accuracy, train, training_batch, EpochMetrics, TrainConfig, TrainReport, DEFAULT_TRAIN_NOISE_SIGMA,
    MOMENTUM,
};
