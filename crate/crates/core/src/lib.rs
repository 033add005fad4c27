//! Continual learning with an Indian Buffet Process dictionary of weight factors.
//!
//! Each layer owns a shared dictionary of rank-one weight factors; every task
//! selects and weights a sparse subset of them through a stick-breaking IBP
//! posterior trained by backprop. The crate bundles the pieces end to end:
//! a small reverse-mode autodiff engine over fp64 tensors, the Kumaraswamy /
//! Concrete variational machinery, the factorized network and trainer, a
//! Gaussian feature-statistics task oracle, MNIST task streams, and the
//! experiment layer (configs, metrics, checkpoints) the CLI drives.

pub mod data;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
