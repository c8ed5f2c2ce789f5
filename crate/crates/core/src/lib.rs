//! Learned ternary sum-product-network approximations of matrix
//! multiplication, trained under an explicit multiplication budget.

pub mod autodiff;
pub mod budget;
pub mod error;
pub mod infer;
pub mod model_file;
pub mod ops;
pub mod param;
pub mod quantize;
pub mod spn;
pub mod strassen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
