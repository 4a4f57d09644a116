pub mod adapt;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};
