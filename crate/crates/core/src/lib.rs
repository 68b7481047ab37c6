//! Entropy-based patch encoder for semantic segmentation, built on a small
//! CPU tensor/autodiff substrate.
//!
//! Image patches are ranked by a KDE estimate of their grayscale entropy;
//! the top 20% route to a large encoder, the next 40% to a medium one, and
//! the rest to a small one. Encoder outputs fold back into an image-shaped
//! feature that a host segmentation network consumes through concatenation,
//! batch norm, and a final 1x1 convolution. A reconstruction head trained
//! with MSE against the input regularizes the folded feature during
//! training.
//!
//! Modules, bottom up: [`tensor`] (storage, fold/unfold, reverse-mode
//! autodiff), [`nn`] (layers, parameter registry, accounting), [`entropy`]
//! (patch entropy and routing), [`epe`] (the encoder module), [`segnet`]
//! (toy host, losses, mIoU), [`data`] (PPM/PGM and the synthetic dataset),
//! [`train`] (Adam, poly LR, augmentation, loop, checkpoints), [`verify`]
//! (self-check suites), [`cli`] (the `epe` binary's commands).

pub mod cli;
pub mod data;
pub mod entropy;
pub mod epe;
pub mod error;
pub mod nn;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
