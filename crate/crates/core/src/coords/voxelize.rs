//! Sparse voxelization: floored lattice assignment and mean feature pooling.

use super::{Coord, CoordError, CoordHashMap, PointTensor};
use crate::nn::FeatureMatrix;

/// Point-to-voxel assignment produced by [`voxelize_coords`].
#[derive(Debug, Clone)]
pub struct VoxelizeMap {
    /// Voxel row owning each point.
    pub point_to_voxel: Vec<u32>,
    /// Number of member points per voxel row; always at least 1.
    pub voxel_point_count: Vec<u32>,
}

impl VoxelizeMap {
    pub fn voxel_count(&self) -> usize {
        self.voxel_point_count.len()
    }
}

#[inline]
fn lattice(p: f32, v: f32) -> i32 {
    (p / v).floor() as i32
}

/// Assigns every point its floored lattice cell at stride 1. Voxel rows are
/// the unique cells in first-appearance order.
pub fn voxelize_coords(
    points: &PointTensor,
    voxel_size: f32,
) -> Result<(Vec<Coord>, VoxelizeMap), CoordError> {
    if voxel_size <= 0.0 || !voxel_size.is_finite() {
        return Err(CoordError::NonPositiveVoxelSize(voxel_size));
    }
    let mut coords = Vec::new();
    let mut map = CoordHashMap::with_capacity(points.len());
    let mut point_to_voxel = Vec::with_capacity(points.len());
    let mut voxel_point_count: Vec<u32> = Vec::new();
    for (i, pos) in points.positions.iter().enumerate() {
        let c = Coord::new(
            points.batch[i],
            lattice(pos[0], voxel_size),
            lattice(pos[1], voxel_size),
            lattice(pos[2], voxel_size),
        );
        let row = match map.insert(c, coords.len() as u32) {
            Some(existing) => existing,
            None => {
                coords.push(c);
                voxel_point_count.push(0);
                (coords.len() - 1) as u32
            }
        };
        point_to_voxel.push(row);
        voxel_point_count[row as usize] += 1;
    }
    Ok((
        coords,
        VoxelizeMap {
            point_to_voxel,
            voxel_point_count,
        },
    ))
}

/// Mean of member-point features per voxel row.
pub fn voxelize_features(
    point_features: &FeatureMatrix,
    vmap: &VoxelizeMap,
) -> Result<FeatureMatrix, CoordError> {
    if point_features.rows() != vmap.point_to_voxel.len() {
        return Err(CoordError::InconsistentMap(format!(
            "{} feature rows vs {} mapped points",
            point_features.rows(),
            vmap.point_to_voxel.len()
        )));
    }
    if vmap.voxel_point_count.contains(&0) {
        return Err(CoordError::InconsistentMap(
            "voxel with zero member points".into(),
        ));
    }
    let cols = point_features.cols();
    let mut out = FeatureMatrix::zeros(vmap.voxel_count(), cols);
    for (k, &row) in vmap.point_to_voxel.iter().enumerate() {
        let dst = out.row_mut(row as usize);
        for (d, &s) in dst.iter_mut().zip(point_features.row(k)) {
            *d += s;
        }
    }
    for (row, &n) in vmap.voxel_point_count.iter().enumerate() {
        let inv = 1.0 / n as f32;
        for v in out.row_mut(row) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Gradient of [`voxelize_features`]: each point receives its voxel's
/// gradient scaled by `1 / N`.
pub fn voxelize_backward(grad_voxels: &FeatureMatrix, vmap: &VoxelizeMap) -> FeatureMatrix {
    debug_assert_eq!(grad_voxels.rows(), vmap.voxel_count());
    let cols = grad_voxels.cols();
    let mut out = FeatureMatrix::zeros(vmap.point_to_voxel.len(), cols);
    for (k, &row) in vmap.point_to_voxel.iter().enumerate() {
        let inv = 1.0 / vmap.voxel_point_count[row as usize] as f32;
        let dst = out.row_mut(k);
        for (d, &g) in dst.iter_mut().zip(grad_voxels.row(row as usize)) {
            *d = g * inv;
        }
    }
    out
}
