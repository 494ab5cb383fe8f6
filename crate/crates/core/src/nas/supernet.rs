//! The weight-sharing supernet: one network allocated at maximal width and
//! depth, from which any candidate is a leading-channel/leading-block slice.

use super::{NasError, SearchSpace};
use crate::backbone::{build_network, ArchSpec, Family, NetworkInstance};
use crate::pipeline::MacsStats;

#[derive(Debug, Clone)]
pub struct SuperNet {
    pub net: NetworkInstance,
    pub space: SearchSpace,
}

impl SuperNet {
    /// Allocates the supernet at the space's maximal spec, deterministically
    /// initialized from `seed`.
    pub fn new(space: SearchSpace, family: Family, seed: u64) -> Result<Self, NasError> {
        space.validate()?;
        let net = build_network(&space.max_spec(), family, seed)?;
        Ok(Self { net, space })
    }

    /// Restricts the live views to `spec` (validated against the space).
    pub fn slice(&mut self, spec: &ArchSpec) -> Result<(), NasError> {
        slice_weights(self, spec)
    }

    /// A topology clone sliced to `spec`; the parameter store is untouched,
    /// so workers can hold their own slices over shared weights.
    pub fn sliced_topology(
        &self,
        spec: &ArchSpec,
    ) -> Result<crate::backbone::NetTopology, NasError> {
        if !self.space.contains(spec) {
            return Err(NasError::OutsideSpace(spec.to_canonical_json()));
        }
        let mut topo = self.net.topo.clone();
        topo.apply_slice(spec)?;
        Ok(topo)
    }
}

/// Points every layer of the supernet at the leading channels and blocks
/// named by `spec`. No weights are copied; forward and backward run directly
/// against the sliced views.
pub fn slice_weights(sn: &mut SuperNet, spec: &ArchSpec) -> Result<(), NasError> {
    if !sn.space.contains(spec) {
        return Err(NasError::OutsideSpace(spec.to_canonical_json()));
    }
    sn.net.apply_slice(spec)?;
    Ok(())
}

/// MACs of a candidate from calibration statistics: the sum over convolution
/// layers of `mean kernel-map entries x in_ch x out_ch`, plus the point
/// branches and classifier at `mean points x in_ch x out_ch`.
pub fn estimate_macs(spec: &ArchSpec, family: Family, stats: &MacsStats) -> f64 {
    crate::backbone::macs_totals(spec, family, stats).2
}
