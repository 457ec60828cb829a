//! Co-attention network for self-supervised audio-visual synchronization.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`ops`]: dense tensors and define-by-run reverse-mode autodiff.
//! * [`nn`]: convolution, pooling, normalization, losses, optimizers, parameter stores.
//! * [`attention`]: scaled dot-product and multi-head attention, the SA / AGA / VGA / CMA
//!   blocks and the cascaded co-attention stack.
//! * [`encoders`]: audio and visual encoders, fusion head and the assembled model.
//! * [`data`]: a synthetic audio-visual world, temporal-shift pair sampling, dataset files.
//! * [`tasks`]: pretext training, evaluation, localization heatmaps and fine-tuning.

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape, Var};
pub use tensor::{DType, Tensor};
