//! Occlusion-aware unsupervised optical flow at desk scale.
//!
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape.
//! * [`warp`]: forward warping (range and occlusion maps) and backward
//!   warping, plain bilinear and with an enlarged search window.
//! * [`loss`]: occlusion-masked photometric and edge-aware smoothness terms.
//! * [`net`]: a small coarse-to-fine encoder–decoder predicting flow in
//!   both directions with shared weights.
//! * [`data`]: synthetic moving-shapes scenes with exact ground truth,
//!   preprocessing, augmentation and flow file formats.
//! * [`traineval`]: Adam, the training loop and evaluation metrics.

pub mod data;
pub mod error;
pub mod loss;
pub mod net;
pub mod tensor;
pub mod traineval;
pub mod warp;

pub use error::{FlowError, Result};
pub use tensor::{Tape, Tensor, Var};
