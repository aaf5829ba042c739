//! Minimal dense-tensor numerics: forward kernels, a reverse-mode tape, and
//! a finite-difference oracle for checking the backward rules.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use tape::{Tape, Var};
pub use tensor::{NumError, Real, Tensor, LAYER_NORM_EPS, MASK_SENTINEL};
