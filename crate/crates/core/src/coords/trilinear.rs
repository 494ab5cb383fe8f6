//! Trilinear devoxelization: per-point interpolation from the 8 surrounding
//! lattice corners.

use super::{CoordHashMap, PointTensor, SparseTensor};
use crate::nn::FeatureMatrix;

/// The 8 corner contributions of one point: voxel rows (or `None` when the
/// corner is inactive) and the matching trilinear weights.
struct Corners {
    row: [Option<u32>; 8],
    weight: [f32; 8],
}

#[inline]
fn corners(
    pos: &[f32; 3],
    batch: i32,
    voxel_size: f32,
    stride: i32,
    hash: &CoordHashMap,
) -> Corners {
    let cell = voxel_size * stride as f32;
    let mut base = [0i32; 3];
    let mut t = [0f32; 3];
    for a in 0..3 {
        let q = pos[a] / cell;
        let b = q.floor();
        base[a] = b as i32;
        t[a] = q - b;
    }
    let mut row: [Option<u32>; 8] = [None; 8];
    let mut weight = [0f32; 8];
    for k in 0..8 {
        let dx = (k >> 2) & 1;
        let dy = (k >> 1) & 1;
        let dz = k & 1;
        let c = super::Coord::new(
            batch,
            (base[0] + dx as i32) * stride,
            (base[1] + dy as i32) * stride,
            (base[2] + dz as i32) * stride,
        );
        row[k] = hash.query(&c);
        let wx = if dx == 1 { t[0] } else { 1.0 - t[0] };
        let wy = if dy == 1 { t[1] } else { 1.0 - t[1] };
        let wz = if dz == 1 { t[2] } else { 1.0 - t[2] };
        weight[k] = wx * wy * wz;
    }
    Corners { row, weight }
}

/// Core interpolation over raw position/batch slices; the voxel rows live in
/// `feats` and are addressed through `hash`.
pub fn devoxelize_rows(
    positions: &[[f32; 3]],
    batch: &[i32],
    feats: &FeatureMatrix,
    voxel_size: f32,
    stride: i32,
    hash: &CoordHashMap,
) -> FeatureMatrix {
    let cols = feats.cols();
    let mut out = FeatureMatrix::zeros(positions.len(), cols);
    for (i, pos) in positions.iter().enumerate() {
        let c = corners(pos, batch[i], voxel_size, stride, hash);
        let dst = out.row_mut(i);
        for k in 0..8 {
            if let Some(row) = c.row[k] {
                let w = c.weight[k];
                for (d, &f) in dst.iter_mut().zip(feats.row(row as usize)) {
                    *d += w * f;
                }
            }
        }
    }
    out
}

/// Adjoint of [`devoxelize_rows`]: scatter-adds each point gradient into its
/// 8 corner rows with the same weights.
pub fn scatter_devoxelize_grad(
    positions: &[[f32; 3]],
    batch: &[i32],
    out_rows: usize,
    voxel_size: f32,
    stride: i32,
    hash: &CoordHashMap,
    grad_points: &FeatureMatrix,
) -> FeatureMatrix {
    debug_assert_eq!(grad_points.rows(), positions.len());
    let cols = grad_points.cols();
    let mut out = FeatureMatrix::zeros(out_rows, cols);
    for (i, pos) in positions.iter().enumerate() {
        let c = corners(pos, batch[i], voxel_size, stride, hash);
        let src = grad_points.row(i);
        for k in 0..8 {
            if let Some(row) = c.row[k] {
                let w = c.weight[k];
                let dst = out.row_mut(row as usize);
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d += w * g;
                }
            }
        }
    }
    out
}

/// Interpolates a feature row for every point from the active corners of its
/// surrounding cell. Inactive corners contribute zero; the weights are not
/// renormalized, so a fully inactive neighborhood yields a zero row.
pub fn devoxelize(points: &PointTensor, s: &SparseTensor, hash: &CoordHashMap) -> FeatureMatrix {
    devoxelize_rows(
        &points.positions,
        &points.batch,
        &s.features,
        s.voxel_size,
        s.tensor_stride,
        hash,
    )
}

/// Adjoint of [`devoxelize`]: scatter-adds each point gradient into its 8
/// corner rows with the same weights.
pub fn devoxelize_backward(
    points: &PointTensor,
    s: &SparseTensor,
    hash: &CoordHashMap,
    grad_points: &FeatureMatrix,
) -> FeatureMatrix {
    scatter_devoxelize_grad(
        &points.positions,
        &points.batch,
        s.len(),
        s.voxel_size,
        s.tensor_stride,
        hash,
        grad_points,
    )
}
