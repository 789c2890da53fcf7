//! PudNet: predict the parameters of a fixed ConvNet for an unseen image
//! dataset in a single forward pass.
//!
//! The pipeline: compress a dataset into a fixed-size sketch, run a
//! GRU-style recurrent unit once per target layer to produce layer-wise
//! parameter representations, and decode each representation into that
//! layer's kernel tensor. Training is episodic over many sampled tasks with
//! a metric loss, an auxiliary full-classification loss, and a consistency
//! loss between the two predictive distributions.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod hypernet;
pub mod infer;
pub mod kernels;
pub mod losses;
pub mod rng;
pub mod sketch;
pub mod tape;
pub mod targetnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
