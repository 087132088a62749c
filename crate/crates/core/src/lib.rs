pub mod attention;
pub mod autograd;
pub mod calibration;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
