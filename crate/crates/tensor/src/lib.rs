//! Minimal dense tensors with tape-based reverse-mode automatic
//! differentiation and an Adam optimizer.
//!
//! Storage is row-major. Most model math runs on 2-D `[rows × cols]`
//! matrices; `Tensor` itself accepts any rank.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{log_softmax_row, Graph, Var};
pub use params::{ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::{softmax, Tensor};
