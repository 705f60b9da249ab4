//! Gated low-rank adapters with l0-constrained adapter selection.
//!
//! The crate trains LoRA-style adapters on frozen toy models, learns a gate
//! vector `omega` with a Top-K hard-thresholding step after every gate update,
//! disconnects the adapters whose gate is zero after a warm-up phase, and can
//! optionally grow the surviving adapters' rank so the adapter memory stays
//! constant.

pub mod adapters;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod catalog;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod sparsifier;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
