//! Define-by-run reverse-mode autodiff over dense `f32`/`f64` tensors.
//!
//! Ops are recorded on a [`Tape`] as they run; [`Tape::backward`] consumes the
//! tape and returns gradients for every leaf that requires them.

mod conv;
mod element;
mod error;
pub mod gradcheck;
mod nn;
mod norm;
pub mod optim;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{AutogradError, Result};
pub use norm::{BatchNormMode, RunningStats, BN_EPS};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;
