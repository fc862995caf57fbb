//! Streaming switch-conformer mixture-of-experts recognizer for
//! code-switching speech.
//!
//! The crate is layered bottom-up: [`numerics`] (tensors and autodiff),
//! [`losses`] (CTC and cross entropy), [`routing`] (the top-1 streaming MoE
//! layer), [`encoder`] and [`decoder`], [`model`] (losses, training,
//! decoding, checkpoints), [`data`] (synthetic corpus and metrics) and
//! [`cli`].

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod routing;

pub use error::{Error, Result};
