//! Residual sparse-convolution block: conv → BN → ReLU → conv → BN, with an
//! identity skip (projected by a 1x1 convolution when channel counts differ)
//! and a final ReLU after the addition.

use super::kernel_map::KernelMap;
use super::layer::SparseConvLayer;
use super::ConvError;
use crate::nn::{
    relu_backward, relu_forward, BatchNormLayer, BnStats, FeatureMatrix, LinearLayer, TensorStore,
};

/// A 1x1 convolution on a sparse tensor touches only the center offset, so
/// the skip projection is a per-row linear map (no bias, BN follows).
#[derive(Debug, Clone)]
pub struct SkipProjection {
    pub linear: LinearLayer,
    pub bn: BatchNormLayer,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: SparseConvLayer,
    pub bn1: BatchNormLayer,
    pub conv2: SparseConvLayer,
    pub bn2: BatchNormLayer,
    pub skip: Option<SkipProjection>,
}

/// Saved activations of one training-mode block pass.
pub struct ResidualBlockCtx {
    pub x: FeatureMatrix,
    pub c1: FeatureMatrix,
    pub s1: BnStats,
    pub a1: FeatureMatrix,
    pub r1: FeatureMatrix,
    pub c2: FeatureMatrix,
    pub s2: BnStats,
    pub skip_out: Option<(FeatureMatrix, BnStats)>,
    pub pre_relu: FeatureMatrix,
}

impl ResidualBlock {
    /// `with_projection` forces the 1x1 skip even when the maximal channel
    /// counts match (needed when slicing can make them differ).
    pub fn new(
        store: &mut TensorStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        with_projection: bool,
    ) -> Self {
        let conv1 = SparseConvLayer::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            1,
            false,
        );
        let bn1 = BatchNormLayer::new(store, &format!("{name}.bn1"), out_channels);
        let conv2 = SparseConvLayer::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            1,
            false,
        );
        let bn2 = BatchNormLayer::new(store, &format!("{name}.bn2"), out_channels);
        let skip = (with_projection || in_channels != out_channels).then(|| SkipProjection {
            linear: LinearLayer::new(
                store,
                &format!("{name}.skip"),
                in_channels,
                out_channels,
                false,
            ),
            bn: BatchNormLayer::new(store, &format!("{name}.skip_bn"), out_channels),
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
        }
    }

    pub fn forward_train(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        kmap: &KernelMap,
    ) -> Result<(FeatureMatrix, ResidualBlockCtx), ConvError> {
        let c1 = self.conv1.forward(ps, x, kmap)?;
        let (a1, s1) = self.bn1.forward_train(ps, &c1).map_err(nn_err)?;
        let r1 = relu_forward(&a1);
        let c2 = self.conv2.forward(ps, &r1, kmap)?;
        let (a2, s2) = self.bn2.forward_train(ps, &c2).map_err(nn_err)?;

        let (skip_val, skip_out) = match &self.skip {
            Some(p) => {
                let lin = p.linear.forward(ps, x).map_err(nn_err)?;
                let (bn, sb) = p.bn.forward_train(ps, &lin).map_err(nn_err)?;
                (bn.clone(), Some((lin, sb)))
            }
            None => (x.clone(), None),
        };
        let mut pre_relu = a2;
        pre_relu.add_assign(&skip_val);
        let out = relu_forward(&pre_relu);
        Ok((
            out,
            ResidualBlockCtx {
                x: x.clone(),
                c1,
                s1,
                a1,
                r1,
                c2,
                s2,
                skip_out,
                pre_relu,
            },
        ))
    }

    pub fn forward_eval(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        kmap: &KernelMap,
    ) -> Result<FeatureMatrix, ConvError> {
        let c1 = self.conv1.forward(ps, x, kmap)?;
        let a1 = self.bn1.forward_eval(ps, &c1).map_err(nn_err)?;
        let r1 = relu_forward(&a1);
        let c2 = self.conv2.forward(ps, &r1, kmap)?;
        let mut pre_relu = self.bn2.forward_eval(ps, &c2).map_err(nn_err)?;
        let skip_val = match &self.skip {
            Some(p) => {
                let lin = p.linear.forward(ps, x).map_err(nn_err)?;
                p.bn.forward_eval(ps, &lin).map_err(nn_err)?
            }
            None => x.clone(),
        };
        pre_relu.add_assign(&skip_val);
        Ok(relu_forward(&pre_relu))
    }

    pub fn backward(
        &self,
        ps: &TensorStore,
        ctx: &ResidualBlockCtx,
        grad_out: &FeatureMatrix,
        kmap: &KernelMap,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        let g_sum = relu_backward(&ctx.pre_relu, grad_out);

        // Main path.
        let g_c2 = self
            .bn2
            .backward(ps, &ctx.c2, Some(&ctx.s2), &g_sum, gs)
            .expect("training stats present");
        let g_r1 = self.conv2.backward(ps, &ctx.r1, &g_c2, kmap, gs);
        let g_a1 = relu_backward(&ctx.a1, &g_r1);
        let g_c1 = self
            .bn1
            .backward(ps, &ctx.c1, Some(&ctx.s1), &g_a1, gs)
            .expect("training stats present");
        let mut grad_in = self.conv1.backward(ps, &ctx.x, &g_c1, kmap, gs);

        // Skip path.
        match (&self.skip, &ctx.skip_out) {
            (Some(p), Some((lin, sb))) => {
                let g_lin =
                    p.bn.backward(ps, lin, Some(sb), &g_sum, gs)
                        .expect("training stats present");
                let g_skip = p.linear.backward(ps, &ctx.x, &g_lin, gs);
                grad_in.add_assign(&g_skip);
            }
            (None, None) => grad_in.add_assign(&g_sum),
            _ => unreachable!("skip context matches skip layer"),
        }
        grad_in
    }

    /// Folds the saved batch statistics into running estimates.
    pub fn update_running(&self, ps: &mut TensorStore, ctx: &ResidualBlockCtx) {
        self.bn1.update_running(ps, &ctx.s1);
        self.bn2.update_running(ps, &ctx.s2);
        if let (Some(p), Some((_, sb))) = (&self.skip, &ctx.skip_out) {
            p.bn.update_running(ps, sb);
        }
    }
}

fn nn_err(e: crate::nn::NnError) -> ConvError {
    match e {
        crate::nn::NnError::ShapeMismatch { op, expected, got } => {
            ConvError::ChannelMismatch { op, expected, got }
        }
        other => panic!("unexpected layer error inside residual block: {other}"),
    }
}
