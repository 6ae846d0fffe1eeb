//! Multimodal multitask clinical prediction with modality-combination tokens,
//! token-level decorrelation, a task-aware mixture of experts and task-guided
//! fusion, plus a synthetic data generator and command-line tooling.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decorrel;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod seqlayout;
pub mod tasks;
pub mod training;

pub use error::{Error, ErrorKind, Result};
