pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mmt;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
