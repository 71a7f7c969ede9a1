//! Two-stage CT volume classification.

pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod lungseg;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod seed;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
