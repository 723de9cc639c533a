//! Multimodal parallel network for audio-visual event localization.
//!
//! A classification subnetwork (stacked self/cross-modal attention) predicts
//! the video's event category; a localization subnetwork (factorized bilinear
//! fusion with a bottlenecked sigmoid gate) predicts per-segment event
//! relevance. Both run on a small reverse-mode autodiff engine in [`tensor`].

pub mod ablation;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod mbam;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{MpnError, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tape, Tensor, Var};
