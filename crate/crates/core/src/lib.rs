//! End-to-end speech recognition core: feature extraction, alignment-driven
//! augmentation, a CNN-fronted transformer trained with a joint CTC/attention
//! objective, and fused beam-search decoding with LM shallow fusion.

pub mod alignment;
pub mod augment;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod parallel;

pub use error::{Error, Result};
