//! Noise-aware self-training for sequence labeling.
//!
//! The crate implements the clean-and-noisy-label EM algorithm (CNLNN) and its
//! all-noisy counterpart (NLNN) on top of a small, dependency-light sequence
//! classifier trained by plain SGD. Everything a training run needs lives
//! here: the corpus data model, a synthetic HMM corpus generator with a known
//! noise channel, the classifier with hand-written gradients, the EM driver,
//! a multi-task trainer, span/token metrics, and the self-training pipeline.
//!
//! IO, file formats and the experiment CLI live in the companion `cnlnn-cli`
//! crate; this crate is `no_std`-compatible (requires `alloc`) so the
//! numerical core stays portable and free of incidental platform coupling.
//!
//! All stochastic operations take explicit seeds and are bit-deterministic:
//! the same inputs and seeds always produce the same parameters, traces and
//! metrics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod em;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod mtl;
pub mod net;
pub mod pipeline;
pub mod rngutil;
pub mod synth;

pub use error::CoreError;
