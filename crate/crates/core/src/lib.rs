pub mod bptt;
pub mod cli;
pub mod coding;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod tensor;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
pub use tensor::{matmul, RngStream, Tensor};
