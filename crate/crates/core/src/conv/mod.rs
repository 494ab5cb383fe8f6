//! Sparse 3-D convolution: kernel-map construction over active sites and the
//! gather/multiply/scatter convolution itself, plus residual blocks.

mod block;
mod kernel_map;
mod layer;

pub use block::{ResidualBlock, ResidualBlockCtx};
pub use kernel_map::{
    build_kernel_map_stride1, build_kernel_map_strided, downsample_coords, KernelMap, KERNEL_VOLUME,
};
pub use layer::SparseConvLayer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("channel mismatch in {op}: layer expects {expected}, features have {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("output coordinate {0:?} is not on the stride-{1} lattice")]
    OffLattice(crate::coords::Coord, i32),
}
