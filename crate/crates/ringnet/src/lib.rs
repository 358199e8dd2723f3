//! Multi-task convolutional-network training with a ring schedule over tasks.
//!
//! The crate trains a shared trunk plus per-task softmax heads by cycling
//! through tasks round-robin, and evaluates the result against independent
//! per-task networks and a single flat multi-class network. Everything runs
//! on the CPU and is deterministic for a fixed seed and thread count.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
