//! f64 tensor kernels and the reverse-mode gradient tape.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
