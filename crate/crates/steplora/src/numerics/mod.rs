//! Dense matrix arithmetic, the parameter store, reverse-mode gradients,
//! and the finite-difference gradient oracle.

mod check;
mod matrix;
mod store;
mod tape;

pub use check::{finite_diff_check, loss_and_grads, loss_value, GradCheckReport, LossFn};
pub use matrix::Matrix;
pub use store::{Param, ParamStore};
pub use tape::{Grads, Tape, Var};
