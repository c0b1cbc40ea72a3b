//! Contraction-mapping softmax losses for quality-aware classifier training.
//!
//! The crate is organized around six pieces:
//!
//! - [`autodiff`]: a minimal reverse-mode differentiation engine with a
//!   finite-difference oracle;
//! - [`losses`]: feature-norm bounds, the contraction mapping, and the
//!   softmax loss family built on a unit-weight zero-bias classifier head;
//! - [`data`]: IDX image loading, batching, and synthetic quality-stratified
//!   datasets;
//! - [`training`]: a deterministic SGD loop over small MLP/CNN backbones with
//!   checkpointing;
//! - [`analysis`]: feature-norm quality partitions, subset reports, FROC/CPM
//!   detection metrics, and 2-D feature scatter plots;
//! - [`config`]: the `key = value` experiment configuration format.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
