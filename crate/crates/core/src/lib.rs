//! Multi-scale time-frequency attention (MTFA) for acoustic event detection.
//!
//! The crate covers the whole pipeline:
//!
//! - [`tensor`], [`ops`], [`graph`], [`exec`]: a small dense-tensor core with
//!   reverse-mode differentiation for exactly the layers the network uses.
//! - [`features`]: WAV loading and 128-bin log-mel spectrograms
//!   (40 ms window, 20 ms hop).
//! - [`model`]: stem, ResNet feature branch, hourglass mask branch, residual
//!   attention `(1 + M) ⊙ F`, bidirectional GRU and frame classifier.
//! - [`training`]: chunking, BCE, Adam, early stopping, checkpoints.
//! - [`postproc`]: padding, thresholding, median filtering, event extraction.
//! - [`evaluation`]: onset-only event-based error rate and F1.
//! - [`synthesis`]: event-over-background mixtures and synthetic sources.

pub mod error;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod gru;
mod linalg;
pub mod model;
pub mod ops;
pub mod params;
pub mod postproc;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use evaluation::{ClassReport, EvalReport};
pub use features::{AudioClip, Spectrogram};
pub use graph::{Graph, Mode, Var};
pub use model::{MaskKind, ModelConfig, Mtfa};
pub use params::{ParamId, ParamStore, Parameter};
pub use postproc::EventAnnotation;
pub use tensor::Tensor;
