//! Dense f64 tensors with a reverse-mode tape.
//!
//! Everything the model computes is built from the primitives on [`Graph`].
//! A graph is single-threaded; independent graphs may run concurrently over
//! the same immutable parameter values.

mod gradcheck;
mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckReport};
pub use serialize::{read_named_tensors, read_u32 as read_u32_le, read_u64 as read_u64_le, write_named_tensors};
pub use tape::{Graph, Var};
pub use tensor::Tensor;

/// Additive value used for blocked attention entries.
pub const MASK_BLOCKED: f64 = -1e9;
