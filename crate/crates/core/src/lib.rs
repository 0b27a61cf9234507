//! Multimodal Transformer distillation for audio-visual synchronization.
//!
//! A teacher/student pair of cross-modal Transformer synchronizers, the
//! attention-behaviour distillation objective and five baseline distillers,
//! a deterministic synthetic audio-visual corpus, training with warmup and
//! step decay, and the 31-candidate retrieval evaluation with its ablation
//! harnesses. Everything runs on a small built-in reverse-mode autodiff.

pub mod ablation;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod model;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;

pub use binio::digest;
pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
