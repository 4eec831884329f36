//! Training engine for dense-block convolutional classifiers with
//! layer-freeze schedules for transfer learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: n-dimensional tensors and reverse-mode differentiation.
//! - [`model`]: the dense-block network, its layer groups and head swap.
//! - [`scheduler`]: which layer groups train at each epoch (FT-all, FT-FC,
//!   sequential fine-tuning).
//! - [`training`]: weighted cross-entropy, SGD with momentum, the epoch loop.
//! - [`evaluation`]: confusion matrices, binary projections, ROC and AUC.
//! - [`data`]: datasets, raster images, splits, synthetic textures, weights files.
//! - [`harness`]: the end-to-end pretrain / cross-validated experiment protocol.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod scheduler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
