//! Device-robust knowledge distillation on synthetic device-shifted data.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;
