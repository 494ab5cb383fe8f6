//! Per-scene coordinate pipeline.
//!
//! Everything the backbone needs that depends only on point positions — the
//! voxel coordinate sets at every stride, their hash maps, every kernel map,
//! and every point-to-voxel assignment — is computed once per scene here and
//! shared by forward passes, MACs accounting, and calibration.

use crate::conv::{
    build_kernel_map_stride1, build_kernel_map_strided, downsample_coords, KernelMap,
};
use crate::coords::{
    build_hash_map, voxelize_coords, Coord, CoordError, CoordHashMap, PointTensor, VoxelizeMap,
};

/// Number of lattice levels: stride 1 plus four downsamplings.
pub const LEVELS: usize = 5;

/// Active coordinates of one lattice level with their lookup table.
pub struct LevelCoords {
    pub coords: Vec<Coord>,
    pub hash: CoordHashMap,
    pub stride: i32,
}

/// Entry counts per conv position, gathered from one scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineCounts {
    pub points: usize,
    pub rows: [usize; LEVELS],
    pub sub_entries: [usize; LEVELS],
    pub down_entries: [usize; LEVELS - 1],
    pub up_entries: [usize; LEVELS - 1],
}

/// Mean entry counts over a calibration set; the statistics MACs estimation
/// runs on.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct MacsStats {
    pub points: f64,
    pub rows: [f64; LEVELS],
    pub sub_entries: [f64; LEVELS],
    pub down_entries: [f64; LEVELS - 1],
    pub up_entries: [f64; LEVELS - 1],
}

pub struct ScenePipeline {
    pub voxel_size: f32,
    pub levels: [LevelCoords; LEVELS],
    /// Submanifold kernel map per level.
    pub sub_maps: [KernelMap; LEVELS],
    /// Downsampling map from level k to k+1.
    pub down_maps: [KernelMap; LEVELS - 1],
    /// Transposed map from level k+1 back to the cached level-k coordinates.
    pub up_maps: [KernelMap; LEVELS - 1],
    /// Point-to-voxel assignment per level.
    pub point_maps: [VoxelizeMap; LEVELS],
}

impl ScenePipeline {
    pub fn build(
        positions: &[[f32; 3]],
        batch: &[i32],
        voxel_size: f32,
    ) -> Result<Self, CoordError> {
        assert_eq!(positions.len(), batch.len());
        let probe = PointTensor::new(
            positions.to_vec(),
            crate::nn::FeatureMatrix::zeros(positions.len(), 0),
            batch.to_vec(),
        );
        let (coords0, vmap0) = voxelize_coords(&probe, voxel_size)?;

        // Stride-1 cell of each point, reused for the coarser assignments.
        let cells: Vec<Coord> = vmap0
            .point_to_voxel
            .iter()
            .map(|&r| coords0[r as usize])
            .collect();

        let mut levels: Vec<LevelCoords> = Vec::with_capacity(LEVELS);
        let hash0 = build_hash_map(&coords0)?;
        levels.push(LevelCoords {
            coords: coords0,
            hash: hash0,
            stride: 1,
        });
        for l in 1..LEVELS {
            let prev = &levels[l - 1];
            let coords = downsample_coords(&prev.coords, prev.stride);
            let hash = build_hash_map(&coords)?;
            let stride = prev.stride * 2;
            levels.push(LevelCoords {
                coords,
                hash,
                stride,
            });
        }

        let sub_maps: Vec<KernelMap> = levels
            .iter()
            .map(|lv| build_kernel_map_stride1(&lv.coords, &lv.hash, lv.stride))
            .collect();
        let mut down_maps = Vec::with_capacity(LEVELS - 1);
        let mut up_maps = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS - 1 {
            let fine = &levels[l];
            let coarse = &levels[l + 1];
            let down = build_kernel_map_strided(&fine.hash, &coarse.coords, fine.stride, false)
                .expect("coarse coords are on the doubled lattice by construction");
            let up = build_kernel_map_strided(&coarse.hash, &fine.coords, fine.stride, true)
                .expect("transposed maps have no lattice precondition");
            down_maps.push(down);
            up_maps.push(up);
        }

        let point_maps: Vec<VoxelizeMap> = levels
            .iter()
            .map(|lv| point_map_at(&cells, lv))
            .collect::<Result<_, _>>()?;

        Ok(Self {
            voxel_size,
            levels: to_array(levels),
            sub_maps: to_array(sub_maps),
            down_maps: to_array(down_maps),
            up_maps: to_array(up_maps),
            point_maps: to_array(point_maps),
        })
    }

    pub fn points(&self) -> usize {
        self.point_maps[0].point_to_voxel.len()
    }

    pub fn counts(&self) -> PipelineCounts {
        let mut c = PipelineCounts {
            points: self.points(),
            ..Default::default()
        };
        for l in 0..LEVELS {
            c.rows[l] = self.levels[l].coords.len();
            c.sub_entries[l] = self.sub_maps[l].total_entries();
        }
        for l in 0..LEVELS - 1 {
            c.down_entries[l] = self.down_maps[l].total_entries();
            c.up_entries[l] = self.up_maps[l].total_entries();
        }
        c
    }
}

/// Assigns every point its active voxel row at a given level. Every level-`l`
/// voxel contains at least one point because the coarse sets are floored
/// images of the stride-1 set.
fn point_map_at(cells: &[Coord], level: &LevelCoords) -> Result<VoxelizeMap, CoordError> {
    let s = level.stride;
    let mut point_to_voxel = Vec::with_capacity(cells.len());
    let mut voxel_point_count = vec![0u32; level.coords.len()];
    for c in cells {
        let coarse = Coord::new(
            c.batch,
            c.x.div_euclid(s) * s,
            c.y.div_euclid(s) * s,
            c.z.div_euclid(s) * s,
        );
        let row = level.hash.query(&coarse).ok_or_else(|| {
            CoordError::InconsistentMap(format!("cell {coarse:?} missing at stride {s}"))
        })?;
        point_to_voxel.push(row);
        voxel_point_count[row as usize] += 1;
    }
    debug_assert!(voxel_point_count.iter().all(|&n| n > 0));
    Ok(VoxelizeMap {
        point_to_voxel,
        voxel_point_count,
    })
}

fn to_array<T, const N: usize>(v: Vec<T>) -> [T; N] {
    match v.try_into() {
        Ok(a) => a,
        Err(_) => unreachable!("fixed level count"),
    }
}

/// Mean kernel-map sizes and row counts over a calibration set, the
/// per-layer statistics used to turn an architecture into a MACs figure
/// without running it. Deterministic given the scene order.
pub fn estimate_kernel_map_sizes(counts: &[PipelineCounts]) -> Result<MacsStats, CoordError> {
    if counts.is_empty() {
        return Err(CoordError::InconsistentMap("empty calibration set".into()));
    }
    let inv = 1.0 / counts.len() as f64;
    let mut s = MacsStats::default();
    for c in counts {
        s.points += c.points as f64 * inv;
        for l in 0..LEVELS {
            s.rows[l] += c.rows[l] as f64 * inv;
            s.sub_entries[l] += c.sub_entries[l] as f64 * inv;
        }
        for l in 0..LEVELS - 1 {
            s.down_entries[l] += c.down_entries[l] as f64 * inv;
            s.up_entries[l] += c.up_entries[l] as f64 * inv;
        }
    }
    Ok(s)
}
