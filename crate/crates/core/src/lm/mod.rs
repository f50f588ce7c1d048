//! A small decoder-only transformer with a pluggable frequency basis.

mod checkpoint;
mod config;
pub mod corpus;
mod model;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, TrainConfig};
pub use model::{LmGradients, SeqInput, TinyLm};
pub use train::{evaluate_ppl, lm_loss_and_grads, total_nll, train_step, StepOutcome, StepRngs, TrainState};

pub(crate) use model::backprop_logprobs;
pub(crate) use train::clip;
