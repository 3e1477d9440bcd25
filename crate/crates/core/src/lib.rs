//! Two-shot self-training video object segmentation, desk scale.
//!
//! A matching-based backbone (key/value encoders, memory read-out, decoder)
//! trained under a three-stage paradigm: supervised teacher on two labeled
//! frames per video, quadro-inference pseudo-labeling, and student
//! re-training with source-dependent augmentation. A contrastive space-time
//! consistency loss regularizes patch correspondences across frames.
//!
//! This crate holds the pure algorithms; dataset files, checkpoints, and the
//! CLI live in the companion `tsvos-cli` crate.

pub mod augment;
pub mod autodiff;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod rng;
pub mod stcs;
pub mod synth;
pub mod trainer;
pub mod types;

pub use types::{Config, Error, Frame, LabelSet, Mask, Result, VideoSample};
