//! The sparse convolution layer: 27 weight matrices applied through a kernel
//! map.

use super::kernel_map::{KernelMap, KERNEL_VOLUME};
use super::ConvError;
use crate::nn::{ChannelView, FeatureMatrix, ParamId, TensorKind, TensorStore};
use crate::profile;

/// Sparse 3x3x3 convolution. Weights are stored as 27 `out_max x in_max`
/// matrices in offset order; there is no bias (normalization always follows).
/// Active channel slices follow the same view rules as `LinearLayer`.
#[derive(Debug, Clone)]
pub struct SparseConvLayer {
    pub weight: ParamId,
    pub in_max: usize,
    pub out_max: usize,
    pub in_view: ChannelView,
    pub out_active: usize,
    /// 1 for submanifold, 2 for down/upsampling layers. Descriptive only;
    /// the kernel map carries the actual geometry.
    pub stride: usize,
    pub transposed: bool,
}

impl SparseConvLayer {
    pub fn new(
        store: &mut TensorStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        transposed: bool,
    ) -> Self {
        let weight = store.alloc(
            format!("{name}.weight"),
            TensorKind::Param,
            KERNEL_VOLUME * out_channels * in_channels,
        );
        Self {
            weight,
            in_max: in_channels,
            out_max: out_channels,
            in_view: ChannelView::dense(in_channels),
            out_active: out_channels,
            stride,
            transposed,
        }
    }

    pub fn in_active(&self) -> usize {
        self.in_view.total()
    }

    /// `out[o] += W_k · in[i]` over every pair (i, o) of every offset bucket
    /// k. Rows with no incident pairs stay zero.
    pub fn forward(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        kmap: &KernelMap,
    ) -> Result<FeatureMatrix, ConvError> {
        let in_active = self.in_active();
        if x.cols() != in_active {
            return Err(ConvError::ChannelMismatch {
                op: "sparse_conv_forward",
                expected: in_active,
                got: x.cols(),
            });
        }
        debug_assert_eq!(x.rows(), kmap.in_rows);
        let w = ps.get(self.weight);
        let mut out = FeatureMatrix::zeros(kmap.out_rows, self.out_active);
        for (k, bucket) in kmap.pairs.iter().enumerate() {
            let wk = &w[k * self.out_max * self.in_max..];
            for &(i, o) in bucket {
                let xr = x.row(i as usize);
                let or = out.row_mut(o as usize);
                for (oc, ov) in or.iter_mut().enumerate() {
                    let wrow = &wk[oc * self.in_max..(oc + 1) * self.in_max];
                    let mut acc = 0.0f32;
                    let mut act = 0;
                    for seg in &self.in_view.segs {
                        acc += crate::nn::dot(
                            &wrow[seg.phys..seg.phys + seg.len],
                            &xr[act..act + seg.len],
                        );
                        act += seg.len;
                    }
                    *ov += acc;
                }
            }
        }
        profile::record_macs(
            kmap.total_entries() as u64 * in_active as u64 * self.out_active as u64,
        );
        Ok(out)
    }

    /// Input gradient plus weight-gradient accumulation: for every pair,
    /// `grad_in[i] += W_k^T · grad_out[o]` and `Wgrad_k += grad_out[o] ⊗ in[i]`.
    pub fn backward(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        grad_out: &FeatureMatrix,
        kmap: &KernelMap,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        debug_assert_eq!(grad_out.rows(), kmap.out_rows);
        debug_assert_eq!(grad_out.cols(), self.out_active);
        let w = ps.get(self.weight);
        let in_active = self.in_active();
        let mut grad_in = FeatureMatrix::zeros(kmap.in_rows, in_active);

        for (k, bucket) in kmap.pairs.iter().enumerate() {
            let wk = &w[k * self.out_max * self.in_max..];
            for &(i, o) in bucket {
                let g = grad_out.row(o as usize);
                let gi = grad_in.row_mut(i as usize);
                for (oc, &go) in g.iter().enumerate() {
                    let wrow = &wk[oc * self.in_max..(oc + 1) * self.in_max];
                    let mut act = 0;
                    for seg in &self.in_view.segs {
                        crate::nn::axpy(
                            &mut gi[act..act + seg.len],
                            go,
                            &wrow[seg.phys..seg.phys + seg.len],
                        );
                        act += seg.len;
                    }
                }
            }
        }

        let wg = gs.get_mut(self.weight);
        for (k, bucket) in kmap.pairs.iter().enumerate() {
            let wk = &mut wg[k * self.out_max * self.in_max..(k + 1) * self.out_max * self.in_max];
            for &(i, o) in bucket {
                let g = grad_out.row(o as usize);
                let xr = x.row(i as usize);
                for (oc, &go) in g.iter().enumerate() {
                    let wrow = &mut wk[oc * self.in_max..(oc + 1) * self.in_max];
                    let mut act = 0;
                    for seg in &self.in_view.segs {
                        crate::nn::axpy(
                            &mut wrow[seg.phys..seg.phys + seg.len],
                            go,
                            &xr[act..act + seg.len],
                        );
                        act += seg.len;
                    }
                }
            }
        }
        grad_in
    }

    /// Test/setup helper: writes the weight matrix of one offset bucket.
    pub fn set_offset_weights(&self, ps: &mut TensorStore, k: usize, rows: &[Vec<f32>]) {
        assert_eq!(rows.len(), self.out_max);
        let w = ps.get_mut(self.weight);
        let base = k * self.out_max * self.in_max;
        for (oc, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), self.in_max);
            w[base + oc * self.in_max..base + (oc + 1) * self.in_max].copy_from_slice(row);
        }
    }
}
