//! Meta-tuned classification losses and augmentation for few-shot detection on a
//! synthetic benchmark.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pipeline;
pub mod policy;
pub mod proxytask;
pub mod rng;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
