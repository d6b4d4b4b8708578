pub mod alignment;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod manifest;
pub mod model;
pub mod octnet;
pub mod preprocess;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
