//! Tumor and artifact detection on Mohs surgery slide images.

pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod slide_io;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod zoo;
