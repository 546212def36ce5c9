//! Dense `f64` tensors, a dynamic reverse-mode tape, and the neural
//! primitives built on it.

mod attention;
mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod ops;
mod params;
mod tensor;

pub use attention::AttnLayout;
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
