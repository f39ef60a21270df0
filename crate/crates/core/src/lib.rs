//! Doubly-attentive multimodal neural machine translation.
//!
//! A bidirectional-GRU encoder produces source annotations; a conditional GRU
//! decoder attends over them and, optionally, over a grid of image features
//! using soft, hard stochastic, or local attention. Everything is built on a
//! small tape-based reverse-mode differentiator so gradients can be checked
//! against finite differences.

pub mod attention;
pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod model;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{ImageAttention, Model, ModelConfig};
pub use tensor::{Real, Tensor};
