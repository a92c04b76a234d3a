//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors are NCHW, row-major, generic over `f32`/`f64`. Ops are methods on
//! [`Var`]; each records a node on its [`Tape`], and [`Tape::backward`]
//! fills in gradients for tracked leaves.
//!
//! ```
//! use naturalize_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let loss = x.mul(x).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().item(), Some(6.0));
//! ```

mod adam;
mod error;
mod float;
mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use float::Float;
pub use ops::arith::{elu, sigmoid};
pub use ops::norm::{Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::spatial::{pixel_shuffle, pixel_unshuffle};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
