//! Surface reconstruction from point clouds with an atlas of overfitted
//! ReLU charts.
//!
//! Each chart is a small fully-connected network mapping the unit square into
//! space. Charts are fitted to local neighborhoods of the input cloud with an
//! entropic optimal-transport loss, made consistent on their overlaps through
//! the correspondences that transport produces, and finally resampled into a
//! dense oriented point cloud.

// `!(x > 0.0)` rejects NaN as well; indexed loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod geometry;

pub use error::{Error, Result};
pub use geometry::{
    bounding_box, denormalize, estimate_normals, normalize, Aabb, NormalizationTransform, Point3,
    PointCloud, SpatialIndex, Vector3,
};
pub mod atlas;
pub mod config;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod transport;
