//! Experiment runner: generate noisy data, train every configured head over
//! several seeds, evaluate verification accuracy and noise detection.

pub mod commands;
pub mod config;

pub use commands::Layout;
pub use config::ExperimentConfig;
