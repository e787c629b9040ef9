//! Convolutional image question answering.
//!
//! A question is composed by a sentence CNN (embedding lookup followed by
//! three convolution + max-pooling stages), a precomputed image feature is
//! mapped into the same space, and a multimodal convolution layer fuses the
//! two before a softmax over the closed answer set. Everything is trained
//! end to end with minibatch SGD.
//!
//! Modules:
//!
//! - [`tensor`]: dense arrays, matrix-vector kernels, finite differences
//! - [`layers`]: embedding, 1-D convolution, max-pooling, dense, dropout, softmax
//! - [`sentence`], [`image`], [`fusion`]: the three encoders
//! - [`model`]: wiring, ablation modes, checkpoints
//! - [`trainer`]: SGD loop and gradient checking
//! - [`data`]: triplet files, vocabularies, synthetic scenes
//! - [`metrics`]: accuracy and WUPS

pub mod data;
pub mod error;
pub mod fusion;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sentence;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Example, Mode, Model, ModelConfig, ModelParams};
pub use tensor::Tensor;
