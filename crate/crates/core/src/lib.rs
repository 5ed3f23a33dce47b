//! Semantic segmentation of airborne LiDAR point clouds with hybrid 2D/3D
//! kernel-point convolutions, segment-graph edge-conditioned convolution and
//! spatial-channel attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, SGD and the loss.
//! - [`cloud`]: point cloud storage, file formats, manifests, synthetic scenes.
//! - [`spatial`]: k-d tree, grid subsampling, pyramids, spheres, augmentation.
//! - [`kernel`]: kernel point layouts and the linear correlation.
//! - [`blocks`]: KPConv, hybrid blocks, SegECC and the attention head.
//! - [`segment`]: unsupervised partition and segment graphs.
//! - [`pipeline`]: network assembly, training, voting inference, metrics, CLI.

pub mod blocks;
pub mod cloud;
pub mod error;
pub mod exec;
pub mod kernel;
pub mod pipeline;
pub mod segment;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
