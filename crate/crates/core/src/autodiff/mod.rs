//! A small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as operations execute; a single call to
//! [`Tape::backward`] yields gradients for every leaf that asked for one.
//! Layers and parameter storage live in [`nn`], and [`Adam`] updates a
//! [`ParamStore`] in place.
//!
//! ```
//! use signal_lab::autodiff::{Tape, Tensor};
//!
//! let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
//! let mut tape = Tape::new();
//! let v = tape.leaf(x);
//! let sq = tape.square(v);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub(crate) mod conv;
pub mod nn;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use conv::ConvGeom;
pub use nn::{Bound, Conv2d, ConvTranspose2d, Init, Linear, Mlp, ParamId, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use tape::{sigmoid_scalar, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
