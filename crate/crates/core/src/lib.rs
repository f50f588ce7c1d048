//! Desk-scale laboratory for long-context adaptation of RoPE transformers.

pub mod datagen;
pub mod error;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod ode;
pub mod optim;
pub mod prefopt;
pub mod positions;
pub mod record;
pub mod rng;
pub mod rope;
pub mod scaling;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
