//! Initialization, schedule, optimizer, checkpoints and the training loop.

mod checkpoint;
mod gradcheck;
mod optim;
mod paired;
mod train;

pub use checkpoint::{load_pretrained_backbone, Checkpoint, NamedTensor, CONFIG_TENSOR, MAGIC, VERSION};
pub use gradcheck::{
    check_model_gradients, naive_central_difference, ModelCheckOptions, ModelCheckReport, TensorCheck,
};
pub use optim::{adam_step, init_glorot, lr_at, AdamConfig, AdamState};
pub use train::{best_epoch, check_finite, evaluate_loss, train, EpochRecord, TrainConfig, TrainLog, TrainOutcome};
