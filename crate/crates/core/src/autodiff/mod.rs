//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! [`Gradients`]; parameter gradients are written back into a
//! [`ParameterStore`] with [`Gradients::apply_to`], after which
//! [`ParameterStore::adam_step`] updates the weights.
//!
//! ```
//! use nvs_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.var(Tensor::new([2], vec![0.0, 1.0]).unwrap());
//! let loss = w.sigmoid().mean();
//! let grads = tape.backward(loss).unwrap();
//! assert!((grads.wrt(w).unwrap()[0] - 0.125).abs() < 1e-7);
//! ```

pub mod checkpoint;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_coords};
pub use params::{AdamConfig, Initializer, ParameterStore};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::Tensor;
