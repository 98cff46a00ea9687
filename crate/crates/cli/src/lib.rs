//! Benchmark runner for forward-forward experiments: dataset fetching,
//! training, evaluation and θ sweeps. The `ffbench` binary is a thin layer
//! over this crate.

pub mod cli;
pub mod commands;
pub mod config;
pub mod fetch;
