//! Dense `f64` tensor math with define-by-run reverse-mode differentiation.
//!
//! ```
//! use linesight_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(&[1.0, 2.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, EPS_RANGE};
pub use tape::{ElementwiseOp, Gradients, Operand, Tape, Var};
pub use tensor::{Shape, Tensor};
