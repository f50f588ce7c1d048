//! Experiment drivers, the verification suites and the subcommand entry points.

pub mod commands;
pub mod config;
pub mod extrapolate;
pub mod gradcheck;
pub mod longpo_toy;
pub mod pi_fit;
pub mod verify;
