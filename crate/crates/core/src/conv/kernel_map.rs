//! Kernel maps: for each of the 27 kernel offsets, the (input row, output
//! row) pairs a sparse convolution gathers and scatters.

use super::ConvError;
use crate::coords::{Coord, CoordHashMap};

/// Kernel size is fixed at 3, so a map always has 3^3 offset buckets.
pub const KERNEL_VOLUME: usize = 27;

/// The 27 unit offsets in fixed lexicographic order over (dx, dy, dz).
pub fn unit_offsets() -> [[i32; 3]; KERNEL_VOLUME] {
    let mut out = [[0i32; 3]; KERNEL_VOLUME];
    let mut k = 0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                out[k] = [dx, dy, dz];
                k += 1;
            }
        }
    }
    out
}

/// Active synapses of one convolution, bucketed per kernel offset.
#[derive(Debug, Clone)]
pub struct KernelMap {
    /// Offsets scaled by the lattice step they were built at.
    pub offsets: [[i32; 3]; KERNEL_VOLUME],
    /// Per offset: (input row, output row) pairs, in output-row order.
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub in_rows: usize,
    pub out_rows: usize,
}

impl KernelMap {
    pub fn total_entries(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Exact transpose: same offset buckets, every pair flipped, in/out roles
    /// swapped. Upsampling through the transpose reaches precisely the
    /// coordinates the forward map was built from.
    pub fn transpose(&self) -> KernelMap {
        KernelMap {
            offsets: self.offsets,
            pairs: self
                .pairs
                .iter()
                .map(|b| b.iter().map(|&(i, o)| (o, i)).collect())
                .collect(),
            in_rows: self.out_rows,
            out_rows: self.in_rows,
        }
    }
}

/// Stride-1 ("submanifold") map: output coordinates equal input coordinates;
/// a pair (i, o) exists where `coord(o) + offset` is active at input row `i`.
/// Offsets step by the tensor stride. Exactly `27 * |coords|` lookups.
pub fn build_kernel_map_stride1(
    coords: &[Coord],
    hash: &CoordHashMap,
    tensor_stride: i32,
) -> KernelMap {
    let units = unit_offsets();
    let mut offsets = [[0i32; 3]; KERNEL_VOLUME];
    for (dst, u) in offsets.iter_mut().zip(units) {
        *dst = [
            u[0] * tensor_stride,
            u[1] * tensor_stride,
            u[2] * tensor_stride,
        ];
    }
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); KERNEL_VOLUME];
    for (k, d) in offsets.iter().enumerate() {
        let bucket = &mut pairs[k];
        for (o, c) in coords.iter().enumerate() {
            if let Some(i) = hash.query(&c.offset(d[0], d[1], d[2])) {
                bucket.push((i, o as u32));
            }
        }
    }
    KernelMap {
        offsets,
        pairs,
        in_rows: coords.len(),
        out_rows: coords.len(),
    }
}

/// Coarsens coordinates to the `2 * tensor_stride` lattice: floored division,
/// unique results in first-appearance order.
pub fn downsample_coords(coords: &[Coord], tensor_stride: i32) -> Vec<Coord> {
    let step = 2 * tensor_stride;
    let mut out = Vec::new();
    let mut map = CoordHashMap::with_capacity(coords.len());
    for c in coords {
        let d = Coord::new(
            c.batch,
            c.x.div_euclid(step) * step,
            c.y.div_euclid(step) * step,
            c.z.div_euclid(step) * step,
        );
        if map.insert(d, out.len() as u32).is_none() {
            out.push(d);
        }
    }
    out
}

/// Strided map between two coordinate sets.
///
/// Downsampling (`transposed = false`): `out_coords` lives on the
/// `2 * tensor_stride` lattice and a pair (i, o) exists where
/// `coord_in(i) = coord_out(o) + offset`, offsets stepping by `tensor_stride`.
///
/// Transposed (`transposed = true`): the roles of the matching predicate are
/// swapped — `in_coords` is the coarse set, `out_coords` the cached finer set
/// — producing exactly the transpose of the corresponding downsample map.
pub fn build_kernel_map_strided(
    in_coords_hash: &CoordHashMap,
    out_coords: &[Coord],
    tensor_stride: i32,
    transposed: bool,
) -> Result<KernelMap, ConvError> {
    let units = unit_offsets();
    let mut offsets = [[0i32; 3]; KERNEL_VOLUME];
    for (dst, u) in offsets.iter_mut().zip(units) {
        *dst = [
            u[0] * tensor_stride,
            u[1] * tensor_stride,
            u[2] * tensor_stride,
        ];
    }
    if !transposed {
        let step = 2 * tensor_stride;
        for c in out_coords {
            if c.x % step != 0 || c.y % step != 0 || c.z % step != 0 {
                return Err(ConvError::OffLattice(*c, step));
            }
        }
    }
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); KERNEL_VOLUME];
    for (k, d) in offsets.iter().enumerate() {
        let bucket = &mut pairs[k];
        for (o, c) in out_coords.iter().enumerate() {
            // Downsample matches inputs at `c_out + offset`; the transpose
            // matches coarse inputs at `c_out - offset` so that pair (i, o)
            // sits in the same offset bucket as (o, i) does in the
            // downsample map.
            let probe = if transposed {
                c.offset(-d[0], -d[1], -d[2])
            } else {
                c.offset(d[0], d[1], d[2])
            };
            if let Some(i) = in_coords_hash.query(&probe) {
                bucket.push((i, o as u32));
            }
        }
    }
    Ok(KernelMap {
        offsets,
        pairs,
        in_rows: in_coords_hash.len(),
        out_rows: out_coords.len(),
    })
}
