//! Label-space diffusion classification conditioned on a cross-modal
//! semantic vector.
//!
//! The crate is split into the two training stages and the machinery they
//! share:
//!
//! * [`numkit`]: dense `f64` matrices, a reverse-mode gradient tape and a
//!   finite-difference checker.
//! * [`guidance`]: frozen base encoder with a LoRA adapter on its output
//!   projection, learnable grade prompts, the semantic vector `d` and the
//!   prior `softmax(s * d)`.
//! * [`diffusion`]: the prior-mean-shifted forward process, the conditional
//!   noise predictor and the reverse chain.
//! * [`optim`]: Adam, RAdam, warmup + cosine learning-rate plans, gradient
//!   clipping and EMA.
//! * [`data`]: the synthetic ordinal benchmark with domain shift, stratified
//!   splits and CSV I/O.
//! * [`analysis`]: confusion matrices, accuracy, macro-F1, PCA and
//!   silhouette scores.
//! * [`pipeline`]: the end-to-end commands behind the `cgsd` binary.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
mod error;
pub mod guidance;
pub mod numkit;
pub mod optim;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
