//! Dense tensors, reverse-mode differentiation, seeded randomness and the
//! tensor block file format.

pub mod autodiff;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
pub mod rng;
pub mod tensor;

pub use autodiff::{DiffNode, Gradients, Tape, Var};
pub use gradcheck::{grad_check, GradCheck};
pub use io::DType;
pub use rng::RandomSource;
pub use tensor::{ElemOp, Operand, Tensor};
