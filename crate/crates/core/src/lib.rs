//! Visual attention amplification, contrastive decoding and attention
//! saliency on a miniature multimodal decoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`rng`]: numerics and reverse-mode
//!   differentiation.
//! - [`model`]: the toy decoder over segment-tagged sequences.
//! - [`interventions`]: attention allocation, visual-head selection and the
//!   score rewrite.
//! - [`decoding`]: regular, contrastive and amplified generation with exact
//!   forward-call accounting.
//! - [`saliency`]: gradient-times-attention flow metrics.
//! - [`bench`]: the synthetic biased world, yes/no probing and sweeps.

pub mod bench;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod interventions;
pub mod model;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
