pub mod config;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod model;
pub mod metrics;
pub mod numerics;
pub mod pruning;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
