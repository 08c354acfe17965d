//! Experiment runner for the trilevel stochastic gradient methods in `tsg-core`.

pub mod aggregate;
pub mod config;
pub mod experiment;
pub mod grid;
pub mod verify_cmd;

pub use config::ExperimentConfig;
