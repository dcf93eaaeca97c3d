//! Core of the weight-decay laboratory.
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors with reverse-mode autodiff.
//! - [`models`]: small MLP classifiers with optional batch normalization.
//! - [`optim`]: SGD and the three Adam weight-decay variants, plus decay schedules.
//! - [`instrument`]: norm decompositions, gradient cosines and buffer statistics.
//! - [`sharpness`]: Hessian, box-max and random-perturbation sharpness metrics.
//! - [`data`]: synthetic blobs, label shuffling, CSV/IDX ingestion and batching.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod instrument;
pub mod models;
pub mod optim;
pub mod rng;
pub mod sharpness;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{CrossEntropySplit, Gradients, NodeId, Tape};
pub use tensor::{Param, ParamRole, ParamSet, Tensor};
