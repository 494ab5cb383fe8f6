//! Fully connected layer applied row-wise, with channel-sliced views.

use super::store::{ParamId, TensorStore};
use super::tensor::FeatureMatrix;
use super::NnError;
use crate::profile;

/// One contiguous run of active input channels inside a weight tensor whose
/// physical width is `in_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChanSeg {
    /// First physical column of the run.
    pub phys: usize,
    /// Active length of the run.
    pub len: usize,
}

/// Which input channels of a layer are active, and where they live in the
/// physical weight tensor.
///
/// A plain layer uses a single leading segment. A layer fed by a channel
/// concatenation keeps one segment per source so that slicing a source to
/// fewer channels still addresses the weight columns that were trained for
/// it. Activation columns are always contiguous: segment `k` starts at the
/// sum of the active lengths of segments `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelView {
    pub segs: Vec<ChanSeg>,
}

impl ChannelView {
    pub fn dense(len: usize) -> Self {
        Self {
            segs: vec![ChanSeg { phys: 0, len }],
        }
    }

    pub fn total(&self) -> usize {
        self.segs.iter().map(|s| s.len).sum()
    }
}

/// Dot product with a fixed four-lane accumulation order. The grouping is
/// part of the numeric contract: a sliced view and a standalone layer with
/// the same segment lengths produce bit-identical sums.
#[inline]
pub(crate) fn dot(w: &[f32], x: &[f32]) -> f32 {
    debug_assert_eq!(w.len(), x.len());
    let chunks = w.len() / 4;
    let (mut a0, mut a1, mut a2, mut a3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for c in 0..chunks {
        let b = 4 * c;
        a0 += w[b] * x[b];
        a1 += w[b + 1] * x[b + 1];
        a2 += w[b + 2] * x[b + 2];
        a3 += w[b + 3] * x[b + 3];
    }
    let mut acc = (a0 + a1) + (a2 + a3);
    for i in 4 * chunks..w.len() {
        acc += w[i] * x[i];
    }
    acc
}

/// `acc[j] += s * w[j]` over a segment.
#[inline]
pub(crate) fn axpy(acc: &mut [f32], s: f32, w: &[f32]) {
    debug_assert_eq!(acc.len(), w.len());
    for (a, &v) in acc.iter_mut().zip(w) {
        *a += s * v;
    }
}

/// Row-wise affine map `y = W x + b` over the active channel view.
///
/// The weight tensor is allocated at `out_max x in_max`; forward and backward
/// touch only the `out_active` leading rows and the view's columns, so a
/// sliced layer and a standalone layer of the sliced shape perform the exact
/// same sequence of floating-point operations.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_max: usize,
    pub out_max: usize,
    pub in_view: ChannelView,
    pub out_active: usize,
}

impl LinearLayer {
    /// Allocates a dense layer (no slicing) in `store`.
    pub fn new(
        store: &mut TensorStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        with_bias: bool,
    ) -> Self {
        let weight = store.alloc(
            format!("{name}.weight"),
            super::TensorKind::Param,
            out_channels * in_channels,
        );
        let bias = with_bias.then(|| {
            store.alloc(
                format!("{name}.bias"),
                super::TensorKind::Param,
                out_channels,
            )
        });
        Self {
            weight,
            bias,
            in_max: in_channels,
            out_max: out_channels,
            in_view: ChannelView::dense(in_channels),
            out_active: out_channels,
        }
    }

    pub fn in_active(&self) -> usize {
        self.in_view.total()
    }

    /// `y[r] = W x[r] + b` over active channels.
    pub fn forward(&self, ps: &TensorStore, x: &FeatureMatrix) -> Result<FeatureMatrix, NnError> {
        let in_active = self.in_active();
        if x.cols() != in_active {
            return Err(NnError::ShapeMismatch {
                op: "linear_forward",
                expected: in_active,
                got: x.cols(),
            });
        }
        let w = ps.get(self.weight);
        let b = self.bias.map(|id| ps.get(id));
        let mut out = FeatureMatrix::zeros(x.rows(), self.out_active);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for (oc, o) in or.iter_mut().enumerate() {
                let wrow = &w[oc * self.in_max..(oc + 1) * self.in_max];
                let mut acc = b.map_or(0.0, |b| b[oc]);
                let mut act = 0;
                for seg in &self.in_view.segs {
                    acc += super::linear::dot(
                        &wrow[seg.phys..seg.phys + seg.len],
                        &xr[act..act + seg.len],
                    );
                    act += seg.len;
                }
                *o = acc;
            }
        }
        profile::record_macs(x.rows() as u64 * in_active as u64 * self.out_active as u64);
        Ok(out)
    }

    /// Returns the gradient w.r.t. the input and accumulates weight and bias
    /// gradients into `gs`. `x` is the input saved from the forward pass.
    pub fn backward(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        grad_out: &FeatureMatrix,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        debug_assert_eq!(grad_out.cols(), self.out_active);
        debug_assert_eq!(grad_out.rows(), x.rows());
        let w = ps.get(self.weight);
        let in_active = self.in_active();
        let mut grad_in = FeatureMatrix::zeros(x.rows(), in_active);

        for r in 0..x.rows() {
            let g = grad_out.row(r);
            let gi = grad_in.row_mut(r);
            for (oc, &go) in g.iter().enumerate() {
                let wrow = &w[oc * self.in_max..(oc + 1) * self.in_max];
                let mut act = 0;
                for seg in &self.in_view.segs {
                    super::linear::axpy(
                        &mut gi[act..act + seg.len],
                        go,
                        &wrow[seg.phys..seg.phys + seg.len],
                    );
                    act += seg.len;
                }
            }
        }

        let wg = gs.get_mut(self.weight);
        for r in 0..x.rows() {
            let g = grad_out.row(r);
            let xr = x.row(r);
            for (oc, &go) in g.iter().enumerate() {
                let wrow = &mut wg[oc * self.in_max..(oc + 1) * self.in_max];
                let mut act = 0;
                for seg in &self.in_view.segs {
                    super::linear::axpy(
                        &mut wrow[seg.phys..seg.phys + seg.len],
                        go,
                        &xr[act..act + seg.len],
                    );
                    act += seg.len;
                }
            }
        }

        if let Some(bias) = self.bias {
            let bg = gs.get_mut(bias);
            for r in 0..grad_out.rows() {
                for (oc, &go) in grad_out.row(r).iter().enumerate() {
                    bg[oc] += go;
                }
            }
        }
        grad_in
    }

    /// Test/setup helper: writes an explicit weight matrix (and bias).
    pub fn set_weights(
        &self,
        ps: &mut TensorStore,
        weight_rows: &[Vec<f32>],
        bias: Option<&[f32]>,
    ) {
        assert_eq!(weight_rows.len(), self.out_max);
        let w = ps.get_mut(self.weight);
        for (oc, row) in weight_rows.iter().enumerate() {
            assert_eq!(row.len(), self.in_max);
            w[oc * self.in_max..(oc + 1) * self.in_max].copy_from_slice(row);
        }
        if let (Some(id), Some(b)) = (self.bias, bias) {
            ps.get_mut(id).copy_from_slice(b);
        }
    }
}

/// `max(0, x)` elementwise.
pub fn relu_forward(x: &FeatureMatrix) -> FeatureMatrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Masks `grad_out` where the forward input was `<= 0`.
pub fn relu_backward(x: &FeatureMatrix, grad_out: &FeatureMatrix) -> FeatureMatrix {
    debug_assert_eq!(x.rows(), grad_out.rows());
    debug_assert_eq!(x.cols(), grad_out.cols());
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    out
}
