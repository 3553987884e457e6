//! Semi-supervised multi-task learning on synthetic fetal cardiac phantoms.
//!
//! The crate bundles everything the training pipeline needs: a small
//! reverse-mode autodiff engine, the multi-task network, the phantom
//! generator and its on-disk format, augmentations, pseudo-labelling with
//! weak-to-strong consistency, prototype filtering of classification
//! pseudo-labels, box-driven boundary refinement with IoU gating,
//! view-specific hard masking, evaluation metrics and the staged trainer.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

#[macro_use]
pub mod rng;

pub mod anatomask;
pub mod augment;
pub mod boundref;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod pseudolabel;
pub mod semanchor;
pub mod tensor;
pub mod trainer;

pub use anatomask::View;
pub use error::{Error, Result};
pub use mask::Mask;
pub use phantom::Sample;
pub use tensor::Tensor;
