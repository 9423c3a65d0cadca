//! Single-source meta-transfer traffic forecasting.
//!
//! A desk-scale pipeline: MAML pre-training on one source city, memory-bank
//! mediated spatial transfer to a target city with a different sensor
//! count, and few-shot fine-tuning — on top of a small tape-based
//! reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SsmtError};
