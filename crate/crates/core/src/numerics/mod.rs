//! Dense matrices, masked softmax, layer normalization, a reverse-mode tape and
//! a finite-difference gradient checker. Everything is `f64`.

mod gradcheck;
mod matrix;
pub mod ops;
mod optim;
mod params;
mod tape;

pub use gradcheck::grad_check;
pub use matrix::{dot, l2_norm, Matrix};
pub use ops::{gelu, layer_norm, softmax_masked};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{RowPattern, Tape, Var};

#[cfg(test)]
mod tests;
