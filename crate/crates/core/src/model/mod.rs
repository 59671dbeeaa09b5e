//! The toy multimodal decoder: configuration, weights, forward pass,
//! training and checkpoints.

pub mod checkpoint;
mod config;
mod forward;
mod params;
mod segment;
mod train;

pub use config::ModelConfig;
pub use forward::{
    forward, CallCounter, ForwardOptions, ForwardTrace, HookSite, IdentityHook, InterventionHook, Loss,
};
pub use params::{BlockParams, ModelParams};
pub use segment::{Segment, SegmentMap};
pub use train::{sequence_grad, train, Sequence, TrainConfig, TrainOutcome};
