//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Parameters live in a [`ParamSet`]. A forward pass records operations on a
//! [`Graph`] that borrows the parameter set immutably; [`Graph::backward`]
//! returns [`Gradients`] which are then folded back into the parameter grad
//! slots with [`ParamSet::accumulate`]. Splitting the two steps lets several
//! graphs share one parameter set read-only.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run the same code in `f64`.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod optim;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, GroupReport, FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use real::Real;
pub use tensor::{ParamId, ParamSet, Tensor};
