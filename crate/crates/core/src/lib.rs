pub mod backbone;
pub mod checks;
pub mod config;
pub mod cost;
pub mod decoder;
pub mod deform;
pub mod error;
pub mod layers;
pub mod model;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
