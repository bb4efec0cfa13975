// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod causal;
pub mod corpus;
pub mod dcgcn;
pub mod encoder;
pub mod error;
pub mod forest;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod model;
pub mod parallel;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
