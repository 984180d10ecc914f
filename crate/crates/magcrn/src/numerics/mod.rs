//! Dense tensor algebra with a reverse-mode gradient tape and an independent
//! finite-difference oracle.

pub mod fd;
pub mod tape;
pub mod tensor;

pub use fd::{finite_diff_gradient, max_relative_error, DEFAULT_STEP};
pub use tape::{NodeId, Tape};
pub use tensor::{conv1d_same, relative_error, sigmoid, softmax_rows, Tensor};
