//! CPU engine for sparse point-voxel convolution networks.
//!
//! The crate is organized around the data flow of a point-cloud segmentation
//! network: points are voxelized onto a sparse integer lattice ([`coords`]),
//! convolved with kernel maps over the active sites ([`conv`]), interpolated
//! back to points and fused with a per-point branch ([`spvconv`]), and stacked
//! into an encoder/decoder backbone ([`backbone`]). On top of that sits a
//! weight-sharing supernet with an evolutionary architecture search ([`nas`]),
//! plus synthetic scene generation and file I/O ([`data`]).
//!
//! All floating-point state is `f32`; every operation is deterministic for a
//! fixed seed and worker count.

pub mod backbone;
pub mod conv;
pub mod coords;
pub mod data;
pub mod nas;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod spvconv;

pub use backbone::{ArchSpec, Family, NetworkInstance};
pub use coords::{Coord, CoordHashMap, PointTensor, SparseTensor, VoxelizeMap};
pub use nn::{FeatureMatrix, TensorStore};

/// Mixes a purpose tag into a base seed so that independent random streams
/// (init, shuffling, per-worker sampling) never alias.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
