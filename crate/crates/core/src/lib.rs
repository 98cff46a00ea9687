//! Forward-forward training for dense ReLU networks, with a collaborative
//! variant that lets each layer see the detached goodness of the others, an
//! entropy-based objective, backpropagation baselines, and functional-entropy
//! analysis of trained networks.
//!
//! All arithmetic is `f64` and single-threaded, so a fixed seed reproduces a
//! run bit for bit.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod entropy;
pub mod error;
pub mod ff;
pub mod linalg;
pub mod nn;
pub mod report;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, Rng};
pub use nn::MlpNetwork;
