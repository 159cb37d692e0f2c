pub mod algorithms;
pub mod autograd;
pub mod batch;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod models;
pub mod pseudodomain;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use batch::{Labels, MiniBatch, Normalizer};
pub use error::{Error, Result};
pub use tensor::Tensor;
