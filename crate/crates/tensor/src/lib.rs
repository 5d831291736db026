//! Dense `f64` tensors with define-by-run reverse-mode differentiation, the
//! convolutional layer set used by DEMONet, AdamW and a warm-up cosine
//! learning-rate schedule.

mod autodiff;
mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
pub mod nn;
mod optim;
mod store;
mod tensor;

pub use autodiff::{BatchStats, Conv2dConfig, Gradients, Tape, Var};
pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig, Moments, WarmupCosine};
pub use store::{EntryKind, ParamId, ParamStore};
pub use tensor::Tensor;
