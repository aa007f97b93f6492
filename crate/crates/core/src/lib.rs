pub mod baselines;
pub mod error;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
