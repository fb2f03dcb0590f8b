//! A small hybrid-head language model: causal softmax attention heads fused
//! with delta-rule state heads, trained on synthetic tasks.
//!
//! Start with the `examples/` directory; each capability has a runnable
//! example there.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod layer;
pub mod model;
pub mod numerics;
pub mod params;
pub mod state;
pub mod tape;

pub use error::{Error, Result};
pub use fusion::{CombineMode, FusionConfig, MiddleMode};
pub use numerics::{Rng, Tensor};
pub use params::{NamedTensors, ParamSet};
