//! Core of a differential-diagnosis transformer.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode autodiff engine, vocabularies and sequence framing, patient
//! record assembly and the synthetic corpus generator, the encoder-decoder
//! model with its classifier head, the teacher-forced training step, greedy
//! decoding, and the evaluation metrics. File formats, CSV ingestion and the
//! command line live in the `ddxt` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod infer;
mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Mask, Scalar, Tensor};

/// The seeded generator used for initialization, shuffling and dropout.
pub type Rng = rand_chacha::ChaCha8Rng;
