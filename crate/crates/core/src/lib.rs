//! Span-extraction reading comprehension at desk scale.
//!
//! The crate implements an attention reader end to end: a small dense-tensor
//! library with reverse-mode autodiff, tokenization and corpus handling, a
//! BiLSTM encoder, a multi-block aligner that refines attention with memories
//! of past attention distributions, a two-step answer pointer, maximum
//! likelihood and policy-gradient objectives, a training loop, and
//! KL-divergence diagnostics over recorded attention distributions.

pub mod aligner;
pub mod dataset;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod model;
pub mod objectives;
pub mod pointer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
