//! Hierarchical self-attentive convolution network (HSACN) for review-based
//! rating prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode gradient tape.
//! * [`ingest`]: review parsing, tokenization, truncation caps, corpus building
//!   and the on-disk corpus cache.
//! * [`encoder`] / [`aggregator`]: the convolution + relative-position
//!   self-attention sequence encoder and the attention pooling module.
//! * [`model`]: the word → sentence → review → user/item hierarchy, the
//!   prediction layer, checkpoints and attention reports.
//! * [`train`]: Adam, the epoch loop with validation model selection, RMSE.

pub mod aggregator;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod ingest;
pub mod model;
pub mod parallel;
pub mod real;
pub mod reference;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{HsacnError, Result};
pub use real::{DType, Real};
pub use tensor::{Gradients, Tape, Tensor, Var};
