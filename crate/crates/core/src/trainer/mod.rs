//! End-to-end optimization of the denoiser and segmentation module: the
//! objectives, Adam, the multi-step schedule and the training loop.

mod config;
mod objective;
mod optim;
mod run;

pub use config::{lr_at, Mode, TrainConfig};
pub use objective::{loss_and_grads, Gradients, LossBreakdown, LossWeights, Model, TrainSample, Trainability};
pub use optim::{adam_step, AdamState, Moments, BETA1, BETA2, EPSILON};
pub use run::{
    init_model, make_batch, model_checkpoint, steps_per_epoch, train, train_from, validate, EpochRecord,
    TrainHistory, TrainOutcome,
};

#[cfg(test)]
mod tests;
