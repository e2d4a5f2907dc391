pub mod cae;
pub mod clustering;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ifl;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod ward;

pub use error::{Error, Result};
pub use tensor::Tensor;
