//! Training, distillation and compression toolkit for reparameterizable
//! low-complexity convolutional acoustic-scene classifiers.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff for the op set the
//!   models need, plus Adam.
//! - [`audio`]: waveform to log-mel frontend and the three training-time
//!   augmentations (roll, frequency masking, Freq-MixStyle), all replayable
//!   from compact descriptors.
//! - [`model`]: the Rep-Mobile network; multi-branch depthwise blocks inside
//!   an inverted-residual CNN, plus the on-disk container format.
//! - [`reparam`]: folds batch norms and merges branches into single inference
//!   kernels without changing eval outputs.
//! - [`distill`]: ensemble knowledge distillation with an on-disk teacher
//!   logits cache.
//! - [`prune`]: structured channel pruning with progressive prune-finetune
//!   schedules.
//! - [`complexity`]: exact parameter and MAC accounting.
//! - [`data`], [`train`], [`pipeline`]: synthetic dataset generation, nested
//!   training subsets, the training loop, and the end-to-end recipe.

pub mod audio;
pub mod complexity;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod reparam;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
