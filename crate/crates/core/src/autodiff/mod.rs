//! Dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! Everything is generic over the scalar type (`f32`/`f64` via [`Scalar`]);
//! the crate root exports `f64` aliases, which is what the rest of the
//! pipeline uses.

mod gradcheck;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::{numeric_gradient, op_suite, rel_err, CheckReport};
pub use optim::{clip_grad_norm, Adam, ParamGroup};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor};
