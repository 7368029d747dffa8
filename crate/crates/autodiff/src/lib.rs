//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The [`Tape`] records each operation together with enough state to run
//! its adjoint; [`Tape::backward`] walks the record in reverse. Everything is
//! two-dimensional and shapes are explicit: the only broadcast is
//! [`Tape::add_row`], which adds a bias row to every row of a matrix.
//!
//! ```
//! use cvaegg_autodiff::{Tape, Tensor};
//!
//! let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::row(&[1.0, -1.0]));
//! let wv = tape.param(&w);
//! let y = tape.matmul(x, wv).unwrap();
//! let h = tape.tanh(y);
//! let loss = tape.sum(h);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(wv).unwrap().shape(), (2, 2));
//! ```

mod error;
pub mod gradcheck;
pub mod optim;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::{adam_step, add_weight_decay, clip_gradients, global_norm, AdamConfig, AdamState};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
