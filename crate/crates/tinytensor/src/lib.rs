//! A small dense-tensor library with reverse-mode differentiation, written
//! for CPU-sized models where clarity and testability beat throughput.
//!
//! Tensors are immutable, row-major, and generic over the element type
//! ([`Scalar`], implemented for `f32` and `f64`). Operations build an
//! implicit computation graph; [`Tape::from_root`] linearizes the graph under
//! a scalar loss and [`Tape::backward`] produces gradients keyed by tensor
//! identity. Everything checks its inputs and returns [`TensorError`] rather
//! than panicking, and any op that would produce NaN/Inf fails loudly.
//!
//! Also here because the training loop needs them: a CTC loss with an
//! exhaustive-enumeration reference, an Adam optimizer, central-difference
//! gradient checking, and a versioned checkpoint container.
//!
//! ```
//! use tinytensor::Tensor64 as Tensor;
//!
//! let x = Tensor::param(vec![3.0], &[1])?;
//! let y = x.mul(&x)?; // y = x^2
//! let grads = tinytensor::backward(&y)?;
//! assert_eq!(grads.get(&x).unwrap(), &[6.0]);
//! # Ok::<(), tinytensor::TensorError>(())
//! ```

mod adam;
mod checkpoint;
mod ctc;
mod error;
mod fd;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use ctc::{collapse, ctc_loss, ctc_loss_enumerated, min_frames};
pub use error::{Result, TensorError};
pub use fd::{central_diff, max_rel_err};
pub use ops::{concat_cols, concat_rows, masked_attention, AttnMask};
pub use scalar::Scalar;
pub use tape::{backward, GradStore, Tape};
pub use tensor::Tensor;

/// Double-precision tensor; the pipeline default.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision checkpoint.
pub type Checkpoint64 = Checkpoint<f64>;
