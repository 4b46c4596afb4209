//! Training and benchmarking toolkit for sequential next-item prediction.
//!
//! The crate implements a bucketed, memory-scalable cross-entropy loss (SCE)
//! alongside its baselines (full CE, BCE, BCE with k negatives, sampled CE)
//! over a compact causal-attention backbone, plus the data pipeline,
//! unsampled ranking metrics, a training harness with memory instrumentation,
//! and a Pareto sweep runner.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad_check;
mod kernels;
pub mod losses;
pub mod memory;
pub mod pareto;
pub mod rng;
pub mod sce;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
