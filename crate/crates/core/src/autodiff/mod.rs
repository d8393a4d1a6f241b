//! Dense reverse-mode automatic differentiation over `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] as they run. [`Tape::backward`]
//! walks the tape once in reverse and accumulates gradients into every node
//! that depends on a [`Tape::leaf`]. [`grad_check`] is the finite-difference
//! oracle the rest of the crate tests against.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{ElementwiseOp, ReduceOp, Tape};
pub use tensor::{Tensor, Var};

pub(crate) use tape::logsumexp;
