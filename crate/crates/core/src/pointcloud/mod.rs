//! Geometry and partition primitives shared by the scene encoder and the
//! interaction-guided reweighting layers.
//!
//! Feature matrices are row-major with one row per point (or site, or
//! superpoint) and one column per channel.

mod interp;
mod sampling;
mod scene;
mod superpoint;
mod voxel;

pub use interp::{interpolation_weights, propagate_features, InterpWeights};
pub use sampling::{ball_query_knn, farthest_point_sample, knn_indices};
pub use scene::{Point3, PointCloudScene};
pub use superpoint::{
    build_superpoints, build_superpoints_with, expand_mask, pool_gt_mask, superpoint_pool,
    PoolReducer, SuperpointParams, SuperpointPartition,
};
pub use voxel::{voxelize, VoxelGrid};

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn check_finite(coords: &[Point3], what: &str) -> crate::Result<()> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(crate::Error::domain(format!("{what} contains non-finite coordinates")));
    }
    Ok(())
}
