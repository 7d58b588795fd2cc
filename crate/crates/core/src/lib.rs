pub mod autodiff;
pub mod config;
pub mod data;
pub mod fid;
pub mod harness;
mod binio;
pub mod nn;
pub mod error;
pub mod rng;
pub mod strategy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
