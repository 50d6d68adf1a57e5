//! FatNet: feature-attentive point cloud classification and part
//! segmentation, built on a small reverse-mode autodiff engine.
//!
//! The network stacks FAT layers, each combining a shared-weight point
//! embedding with an edge embedding over a dynamic kNN graph, gated by a
//! squeeze-excite attention block. A global feature aggregation block mixes
//! attention-scaled max and mean pools, and an optional FAT-based transformer
//! aligns the input cloud.

pub mod aggregation;
pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use model::{Model, ModelConfig, Task};
pub use tensor::{Float, Tensor};
