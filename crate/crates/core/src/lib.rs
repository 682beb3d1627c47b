//! Volumetric segmentation engine built around tri-planar 2D convolution.
//!
//! The crate provides a small deterministic tensor runtime (explicit
//! forward/backward kernels, no autograd graph), a tri-planar convolution
//! that applies one bank of 2D kernels along the three anatomical planes of
//! a volume, encoder-decoder segmentation networks assembled from it,
//! weight transfer from pretrained 2D classifiers, overlap and surface
//! metrics, and the training loops that tie them together.
//!
//! Determinism contract: every kernel accumulates in a fixed order, all
//! randomness flows through seeded ChaCha8 streams, and repeated runs on
//! the same machine produce bit-identical results.

pub mod acs;
pub mod conv;
pub mod error;
pub mod matmul;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod postproc;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
