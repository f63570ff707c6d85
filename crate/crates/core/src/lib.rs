//! Motion-enhancement operators for 2D-CNN video classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, tape-based reverse-mode differentiation,
//!   batch norm, gradient checking, binary tensor records.
//! - [`cme`]: channel gates computed from a softmax-weighted fusion of every
//!   frame's descriptor.
//! - [`sme`]: spatial weighting from adjacent-frame cosine similarity.
//! - [`tim`]: depthwise temporal convolution.
//! - [`blocks`]: bottleneck blocks, stages, the classifier, MAC counting and
//!   checkpoints.
//! - [`synthdata`]: moving-square clips with static distractors.
//! - [`harness`]: training, evaluation, ablations, benchmarks, heatmaps and
//!   the self-test suite behind the `cmr` binary.

pub mod blocks;
pub mod cme;
pub mod error;
pub mod harness;
pub mod reference;
pub mod sme;
pub mod synthdata;
pub mod tensor;
pub mod tim;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
