pub mod data;
pub mod error;
pub mod infer;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
