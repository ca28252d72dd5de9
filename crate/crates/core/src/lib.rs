//! Trajectory distillation for few-shot cross-domain adaptation with
//! mismatched label sets.
//!
//! The crate is organised bottom-up: [`linalg`] (dense kernels, thin SVD),
//! [`net`] (MLP with manual backprop), [`trajectory`] (gradient buffers,
//! subspace projectors, the statistics-matching penalty), [`optimizer`]
//! (historical-subspace SGD), [`taxdata`] (synthetic benchmark) and
//! [`harness`] (training loop, metrics, probe, CLI).

pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod optimizer;
pub mod taxdata;
pub mod trajectory;

pub use error::{Error, Result};
