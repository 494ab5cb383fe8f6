//! Integer lattice coordinates, hashing, voxelization, and trilinear
//! devoxelization — the point/voxel bridge.

mod hash;
mod trilinear;
mod voxelize;

pub use hash::CoordHashMap;
pub use trilinear::{devoxelize, devoxelize_backward, devoxelize_rows, scatter_devoxelize_grad};
pub use voxelize::{voxelize_backward, voxelize_coords, voxelize_features, VoxelizeMap};

use crate::nn::FeatureMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("duplicate coordinate {0:?}")]
    DuplicateKey(Coord),
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxelSize(f32),
    #[error("voxelize map is inconsistent: {0}")]
    InconsistentMap(String),
}

/// A lattice site: batch index plus signed integer x/y/z. At tensor stride
/// `s` every component is a multiple of `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub batch: i32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord {
    pub fn new(batch: i32, x: i32, y: i32, z: i32) -> Self {
        Self { batch, x, y, z }
    }

    /// Packs the four components into the 16 little-endian bytes used as the
    /// hash key.
    #[inline]
    pub fn packed(&self) -> u128 {
        (self.batch as u32 as u128)
            | ((self.x as u32 as u128) << 32)
            | ((self.y as u32 as u128) << 64)
            | ((self.z as u32 as u128) << 96)
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Coord {
        Coord::new(self.batch, self.x + dx, self.y + dy, self.z + dz)
    }
}

/// Point cloud: metric positions, per-point features, per-point batch id.
#[derive(Debug, Clone)]
pub struct PointTensor {
    pub positions: Vec<[f32; 3]>,
    pub features: FeatureMatrix,
    pub batch: Vec<i32>,
}

impl PointTensor {
    pub fn new(positions: Vec<[f32; 3]>, features: FeatureMatrix, batch: Vec<i32>) -> Self {
        assert_eq!(positions.len(), features.rows());
        assert_eq!(positions.len(), batch.len());
        Self {
            positions,
            features,
            batch,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Active voxels: unique lattice coordinates, one feature row each, the
/// metric voxel size at stride 1, and the current tensor stride.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub coords: Vec<Coord>,
    pub features: FeatureMatrix,
    pub voxel_size: f32,
    pub tensor_stride: i32,
}

impl SparseTensor {
    pub fn new(
        coords: Vec<Coord>,
        features: FeatureMatrix,
        voxel_size: f32,
        tensor_stride: i32,
    ) -> Self {
        assert_eq!(coords.len(), features.rows());
        debug_assert!(tensor_stride > 0 && (tensor_stride as u32).is_power_of_two());
        debug_assert!(coords.iter().all(|c| c.x % tensor_stride == 0
            && c.y % tensor_stride == 0
            && c.z % tensor_stride == 0));
        Self {
            coords,
            features,
            voxel_size,
            tensor_stride,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Builds a hash map over a list of unique coordinates; the value of each key
/// is its row index. Fails on duplicates, naming the coordinate.
pub fn build_hash_map(coords: &[Coord]) -> Result<CoordHashMap, CoordError> {
    let mut map = CoordHashMap::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        if map.insert(*c, i as u32).is_some() {
            return Err(CoordError::DuplicateKey(*c));
        }
    }
    Ok(map)
}
