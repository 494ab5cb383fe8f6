//! Sparse point-voxel convolution: a sparse voxel branch fused with a
//! full-resolution per-point branch by addition.
//!
//! The point branch is a per-point MLP (linear → BN → ReLU). It never
//! resamples the point set, so fine detail survives even when the voxel
//! branch runs at a coarse stride.

use crate::conv::{ConvError, KernelMap, ResidualBlock, ResidualBlockCtx};
use crate::coords::{
    devoxelize, devoxelize_backward, voxelize_backward, voxelize_features, CoordHashMap,
    PointTensor, SparseTensor, VoxelizeMap,
};
use crate::nn::{
    relu_backward, relu_forward, BatchNormLayer, BnStats, FeatureMatrix, LinearLayer, TensorStore,
};

/// The high-resolution branch: one linear layer, batch norm, ReLU per point.
#[derive(Debug, Clone)]
pub struct PointBranch {
    pub linear: LinearLayer,
    pub bn: BatchNormLayer,
}

pub struct PointBranchCtx {
    pub x: FeatureMatrix,
    pub lin: FeatureMatrix,
    pub stats: BnStats,
    pub pre_relu: FeatureMatrix,
}

impl PointBranch {
    pub fn new(store: &mut TensorStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            linear: LinearLayer::new(store, &format!("{name}.linear"), in_ch, out_ch, true),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward_train(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
    ) -> Result<(FeatureMatrix, PointBranchCtx), crate::nn::NnError> {
        let lin = self.linear.forward(ps, x)?;
        let (pre_relu, stats) = self.bn.forward_train(ps, &lin)?;
        let out = relu_forward(&pre_relu);
        Ok((
            out,
            PointBranchCtx {
                x: x.clone(),
                lin,
                stats,
                pre_relu,
            },
        ))
    }

    pub fn forward_eval(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
    ) -> Result<FeatureMatrix, crate::nn::NnError> {
        let lin = self.linear.forward(ps, x)?;
        Ok(relu_forward(&self.bn.forward_eval(ps, &lin)?))
    }

    pub fn backward(
        &self,
        ps: &TensorStore,
        ctx: &PointBranchCtx,
        grad_out: &FeatureMatrix,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        let g = relu_backward(&ctx.pre_relu, grad_out);
        let g_lin = self
            .bn
            .backward(ps, &ctx.lin, Some(&ctx.stats), &g, gs)
            .expect("training stats present");
        self.linear.backward(ps, &ctx.x, &g_lin, gs)
    }

    pub fn update_running(&self, ps: &mut TensorStore, ctx: &PointBranchCtx) {
        self.bn.update_running(ps, &ctx.stats);
    }
}

/// A self-contained stride-1 module: voxelize → residual blocks → devoxelize,
/// fused with the point branch by addition. The backbone composes the same
/// pieces around its encoder/decoder stages.
pub struct SpvConvModule {
    pub blocks: Vec<ResidualBlock>,
    pub point_branch: PointBranch,
    pub voxel_size: f32,
}

pub struct SpvConvCtx {
    pub vox_in: FeatureMatrix,
    pub blocks: Vec<ResidualBlockCtx>,
    pub point: PointBranchCtx,
}

impl SpvConvModule {
    pub fn new(
        store: &mut TensorStore,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        blocks: usize,
        voxel_size: f32,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let cin = if i == 0 { channels_in } else { channels_out };
                ResidualBlock::new(store, &format!("{name}.block{i}"), cin, channels_out, false)
            })
            .collect();
        Self {
            blocks,
            point_branch: PointBranch::new(
                store,
                &format!("{name}.point"),
                channels_in,
                channels_out,
            ),
            voxel_size,
        }
    }

    /// Runs both branches and fuses them. The point set and its order are
    /// never changed; only the feature matrix is replaced.
    pub fn forward_train(
        &self,
        ps: &TensorStore,
        points: &PointTensor,
        vmap: &VoxelizeMap,
        coords: &[crate::coords::Coord],
        hash: &CoordHashMap,
        kmap: &KernelMap,
    ) -> Result<(FeatureMatrix, SpvConvCtx), ConvError> {
        let vox_in =
            voxelize_features(&points.features, vmap).expect("voxelize map built for these points");
        let mut cur = vox_in.clone();
        let mut block_ctxs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, ctx) = b.forward_train(ps, &cur, kmap)?;
            block_ctxs.push(ctx);
            cur = next;
        }
        let sparse = SparseTensor::new(coords.to_vec(), cur, self.voxel_size, 1);
        let mut fused = devoxelize(points, &sparse, hash);
        let (point_out, point_ctx) = self
            .point_branch
            .forward_train(ps, &points.features)
            .map_err(|e| match e {
                crate::nn::NnError::ShapeMismatch { op, expected, got } => {
                    ConvError::ChannelMismatch { op, expected, got }
                }
                other => panic!("unexpected point-branch error: {other}"),
            })?;
        fused.add_assign(&point_out);
        Ok((
            fused,
            SpvConvCtx {
                vox_in,
                blocks: block_ctxs,
                point: point_ctx,
            },
        ))
    }

    /// The addition fans the upstream gradient unchanged into both branches;
    /// the result is the sum of their input gradients.
    pub fn backward(
        &self,
        ps: &TensorStore,
        points: &PointTensor,
        ctx: &SpvConvCtx,
        grad_out: &FeatureMatrix,
        vmap: &VoxelizeMap,
        coords: &[crate::coords::Coord],
        hash: &CoordHashMap,
        kmap: &KernelMap,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        // Voxel branch.
        let placeholder = SparseTensor::new(
            coords.to_vec(),
            FeatureMatrix::zeros(coords.len(), grad_out.cols()),
            self.voxel_size,
            1,
        );
        let mut g_vox = devoxelize_backward(points, &placeholder, hash, grad_out);
        for (b, bctx) in self.blocks.iter().zip(&ctx.blocks).rev() {
            g_vox = b.backward(ps, bctx, &g_vox, kmap, gs);
        }
        let mut grad_in = voxelize_backward(&g_vox, vmap);

        // Point branch.
        let g_point = self.point_branch.backward(ps, &ctx.point, grad_out, gs);
        grad_in.add_assign(&g_point);
        grad_in
    }
}

/// Per-point L2 norms of a point-branch output.
pub fn feature_norms(features: &FeatureMatrix) -> Vec<f32> {
    (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v * v).sum::<f32>().sqrt())
        .collect()
}

/// Boolean mask of the `ceil(q * n)` points with the largest norms. Ties
/// break toward the lower index, so the mask is deterministic.
pub fn top_quantile_mask(norms: &[f32], q: f64) -> Vec<bool> {
    let n = norms.len();
    let k = ((q * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}
