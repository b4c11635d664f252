//! Dense n-dimensional arrays and the reverse-mode autodiff tape.

mod array;
mod kernels;
mod tape;

pub use array::{Array, Scalar};
pub use tape::{NodeId, Tape};
