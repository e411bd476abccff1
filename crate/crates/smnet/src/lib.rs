//! Learns the inverse map from a deformed 3D point cloud to the control
//! vector of an actuator array, and replays predicted controls through
//! analytic surrogate forward models.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`autodiff`] — reverse-mode differentiation over dense matrices, the
//!   SGD-with-momentum optimizer, and checkpoint serialization.
//! - [`pointcloud`] — cloud container, preprocessing (interior removal,
//!   voxel averaging, random downsampling, normalization), farthest point
//!   sampling, ball queries, and file I/O (XYZ / PLY / PCD1).
//! - [`layers`] — kernel point convolution, set abstraction, feature
//!   propagation, pooling, and the fully connected head.
//! - [`model`] — the assembled regression network, training, evaluation,
//!   and inference.
//! - [`sim`] — surrogate forward models and dataset generation.
//! - [`metrics`] — point-cloud similarity metrics, regression metrics,
//!   error maps, and the surface complexity measure.

pub mod autodiff;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod sim;
