//! Network topology, construction, forward and backward passes.
//!
//! A `NetworkInstance` owns a parameter store plus a topology of layer
//! descriptors. The descriptors carry "active" channel/depth views so a
//! weight-sharing supernet and a standalone network run the exact same code
//! path; a standalone network is simply a topology whose active views cover
//! its whole store.

use super::{ArchSpec, BackboneError, Family, STAGES};
use crate::conv::{KernelMap, ResidualBlock, ResidualBlockCtx, SparseConvLayer};
use crate::coords::{
    devoxelize_rows, scatter_devoxelize_grad, voxelize_backward, voxelize_features, PointTensor,
};
use crate::nn::{
    relu_backward, relu_forward, BatchNormLayer, BnStats, ChanSeg, ChannelView, FeatureMatrix,
    LinearLayer, TensorStore,
};
use crate::pipeline::ScenePipeline;
use crate::spvconv::{feature_norms, PointBranch, PointBranchCtx};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Convolution followed by batch norm and ReLU; the unit used for the stem
/// and for every down/upsampling transition.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: SparseConvLayer,
    pub bn: BatchNormLayer,
}

pub struct ConvUnitCtx {
    x: FeatureMatrix,
    c: FeatureMatrix,
    stats: BnStats,
    pre_relu: FeatureMatrix,
}

impl ConvUnit {
    fn new(
        store: &mut TensorStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        transposed: bool,
    ) -> Self {
        let conv = SparseConvLayer::new(store, name, in_ch, out_ch, stride, transposed);
        init_conv(store, rng, &conv);
        let bn = BatchNormLayer::new(store, &format!("{name}.bn"), out_ch);
        Self { conv, bn }
    }

    fn forward_train(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        kmap: &KernelMap,
    ) -> Result<(FeatureMatrix, ConvUnitCtx), BackboneError> {
        let c = self.conv.forward(ps, x, kmap)?;
        let (pre_relu, stats) = self.bn.forward_train(ps, &c)?;
        let out = relu_forward(&pre_relu);
        Ok((
            out,
            ConvUnitCtx {
                x: x.clone(),
                c,
                stats,
                pre_relu,
            },
        ))
    }

    fn forward_eval(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        kmap: &KernelMap,
    ) -> Result<FeatureMatrix, BackboneError> {
        let c = self.conv.forward(ps, x, kmap)?;
        Ok(relu_forward(&self.bn.forward_eval(ps, &c)?))
    }

    fn backward(
        &self,
        ps: &TensorStore,
        ctx: &ConvUnitCtx,
        grad_out: &FeatureMatrix,
        kmap: &KernelMap,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        let g_pre = relu_backward(&ctx.pre_relu, grad_out);
        let g_c = self
            .bn
            .backward(ps, &ctx.c, Some(&ctx.stats), &g_pre, gs)
            .expect("training stats present");
        self.conv.backward(ps, &ctx.x, &g_c, kmap, gs)
    }
}

/// One encoder stage: strided downsampling unit plus elastic residual blocks.
#[derive(Debug, Clone)]
pub struct EncStage {
    pub down: ConvUnit,
    pub blocks: Vec<ResidualBlock>,
    pub active_blocks: usize,
}

pub struct EncStageCtx {
    down: ConvUnitCtx,
    blocks: Vec<ResidualBlockCtx>,
}

/// One decoder stage: transposed upsampling unit, concatenation with the
/// cached encoder skip, then elastic residual blocks (the first projects the
/// concatenated width back to the stage width).
#[derive(Debug, Clone)]
pub struct DecStage {
    pub up: ConvUnit,
    pub blocks: Vec<ResidualBlock>,
    pub active_blocks: usize,
}

pub struct DecStageCtx {
    up: ConvUnitCtx,
    up_cols: usize,
    blocks: Vec<ResidualBlockCtx>,
}

#[derive(Debug, Clone)]
pub struct NetTopology {
    pub family: Family,
    /// Physical (maximal) architecture the store was allocated for.
    pub max: ArchSpec,
    /// Currently active slice; equals `max` for a standalone network.
    pub active: ArchSpec,
    pub stem: ConvUnit,
    pub enc: Vec<EncStage>,
    pub dec: Vec<DecStage>,
    /// Four point branches for the point-voxel family, `None` for voxel-only.
    pub point_mlps: Option<Vec<PointBranch>>,
    pub classifier: LinearLayer,
}

/// A runnable network: topology plus its parameter store.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    pub topo: NetTopology,
    pub params: TensorStore,
}

/// Saved activations of one training forward pass.
pub struct NetTape {
    stem: ConvUnitCtx,
    enc: Vec<EncStageCtx>,
    dec: Vec<DecStageCtx>,
    mlps: Option<Vec<PointBranchCtx>>,
    classifier_in: FeatureMatrix,
}

/// Inference output: per-point logits plus, for the point-voxel family, the
/// L2 feature norms of the final point branch.
pub struct EvalOutput {
    pub logits: FeatureMatrix,
    pub final_point_norms: Option<Vec<f32>>,
}

fn init_conv(store: &mut TensorStore, rng: &mut ChaCha8Rng, conv: &SparseConvLayer) {
    let bound = (1.0 / (conv.in_max as f32 * 27.0)).sqrt();
    for v in store.get_mut(conv.weight) {
        *v = rng.random_range(-bound..bound);
    }
}

fn init_linear(store: &mut TensorStore, rng: &mut ChaCha8Rng, lin: &LinearLayer) {
    let bound = (1.0 / lin.in_max as f32).sqrt();
    for v in store.get_mut(lin.weight) {
        *v = rng.random_range(-bound..bound);
    }
}

fn init_block(store: &mut TensorStore, rng: &mut ChaCha8Rng, block: &ResidualBlock) {
    init_conv(store, rng, &block.conv1);
    init_conv(store, rng, &block.conv2);
    if let Some(p) = &block.skip {
        init_linear(store, rng, &p.linear);
    }
}

/// Skip source width of decoder stage `k`: encoder stage `2 - k` for the
/// first three, the stem for the last.
fn skip_width(spec: &ArchSpec, k: usize) -> usize {
    match k {
        0..=2 => spec.stage_channels[2 - k],
        3 => spec.stem_channels,
        _ => unreachable!(),
    }
}

/// Builds a network with physical dimensions `spec`, deterministically
/// initialized from `seed`. Active views start fully open.
pub fn build_network(
    spec: &ArchSpec,
    family: Family,
    seed: u64,
) -> Result<NetworkInstance, BackboneError> {
    spec.validate()?;
    let mut store = TensorStore::new();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let enc_ch = spec.encoder_channels().to_vec();
    let dec_ch = spec.decoder_channels().to_vec();

    let stem = ConvUnit::new(
        &mut store,
        &mut rng,
        "stem",
        spec.in_channels,
        spec.stem_channels,
        1,
        false,
    );

    let mut enc = Vec::with_capacity(4);
    for k in 0..4 {
        let in_ch = if k == 0 {
            spec.stem_channels
        } else {
            enc_ch[k - 1]
        };
        let down = ConvUnit::new(
            &mut store,
            &mut rng,
            &format!("enc{k}.down"),
            in_ch,
            enc_ch[k],
            2,
            false,
        );
        let blocks = (0..spec.stage_depths[k])
            .map(|i| {
                let b = ResidualBlock::new(
                    &mut store,
                    &format!("enc{k}.block{i}"),
                    enc_ch[k],
                    enc_ch[k],
                    false,
                );
                init_block(&mut store, &mut rng, &b);
                b
            })
            .collect();
        enc.push(EncStage {
            down,
            blocks,
            active_blocks: spec.stage_depths[k],
        });
    }

    let mut dec = Vec::with_capacity(4);
    for k in 0..4 {
        let in_ch = if k == 0 { enc_ch[3] } else { dec_ch[k - 1] };
        let up = ConvUnit::new(
            &mut store,
            &mut rng,
            &format!("dec{k}.up"),
            in_ch,
            dec_ch[k],
            2,
            true,
        );
        let skip = skip_width(spec, k);
        let cat_ch = dec_ch[k] + skip;
        let blocks = (0..spec.stage_depths[4 + k])
            .map(|i| {
                let (cin, project) = if i == 0 {
                    (cat_ch, true)
                } else {
                    (dec_ch[k], false)
                };
                let mut b = ResidualBlock::new(
                    &mut store,
                    &format!("dec{k}.block{i}"),
                    cin,
                    dec_ch[k],
                    project,
                );
                if i == 0 {
                    // The concatenated input is always addressed as two
                    // segments (stage features, then skip features) so a
                    // sliced supernet and a standalone build accumulate in
                    // the same groups bit for bit.
                    let segs = vec![
                        ChanSeg {
                            phys: 0,
                            len: dec_ch[k],
                        },
                        ChanSeg {
                            phys: dec_ch[k],
                            len: skip,
                        },
                    ];
                    b.conv1.in_view = ChannelView { segs: segs.clone() };
                    if let Some(pr) = &mut b.skip {
                        pr.linear.in_view = ChannelView { segs };
                    }
                }
                init_block(&mut store, &mut rng, &b);
                b
            })
            .collect();
        dec.push(DecStage {
            up,
            blocks,
            active_blocks: spec.stage_depths[4 + k],
        });
    }

    let point_mlps = match family {
        Family::VoxelOnly => None,
        Family::PointVoxel => {
            let dims = [
                (spec.in_channels, spec.stem_channels),
                (spec.stem_channels, enc_ch[3]),
                (enc_ch[3], dec_ch[1]),
                (dec_ch[1], dec_ch[3]),
            ];
            Some(
                dims.iter()
                    .enumerate()
                    .map(|(i, &(cin, cout))| {
                        let p = PointBranch::new(&mut store, &format!("point{i}"), cin, cout);
                        init_linear(&mut store, &mut rng, &p.linear);
                        p
                    })
                    .collect::<Vec<_>>(),
            )
        }
    };

    let classifier = LinearLayer::new(&mut store, "classifier", dec_ch[3], spec.num_classes, true);
    init_linear(&mut store, &mut rng, &classifier);

    Ok(NetworkInstance {
        topo: NetTopology {
            family,
            max: spec.clone(),
            active: spec.clone(),
            stem,
            enc,
            dec,
            point_mlps,
            classifier,
        },
        params: store,
    })
}

impl NetTopology {
    /// Restricts every layer to the leading channels/blocks named by `spec`.
    /// `spec` must fit inside the physical dimensions.
    pub fn apply_slice(&mut self, spec: &ArchSpec) -> Result<(), BackboneError> {
        spec.validate()?;
        let mut violations = Vec::new();
        if spec.in_channels != self.max.in_channels {
            violations.push("in_channels is not sliceable".to_string());
        }
        if spec.num_classes != self.max.num_classes {
            violations.push("num_classes is not sliceable".to_string());
        }
        if spec.stem_channels > self.max.stem_channels {
            violations.push(format!(
                "stem width {} exceeds physical {}",
                spec.stem_channels, self.max.stem_channels
            ));
        }
        for k in 0..STAGES {
            if spec.stage_channels[k] > self.max.stage_channels[k] {
                violations.push(format!(
                    "stage {k} width {} exceeds physical {}",
                    spec.stage_channels[k], self.max.stage_channels[k]
                ));
            }
            if spec.stage_depths[k] > self.max.stage_depths[k] {
                violations.push(format!(
                    "stage {k} depth {} exceeds physical {}",
                    spec.stage_depths[k], self.max.stage_depths[k]
                ));
            }
        }
        if !violations.is_empty() {
            return Err(BackboneError::InvalidSpec { violations });
        }

        let enc_a = spec.encoder_channels().to_vec();
        let dec_a = spec.decoder_channels().to_vec();
        let enc_max = self.max.encoder_channels().to_vec();
        let dec_max = self.max.decoder_channels().to_vec();

        self.stem.conv.in_view = ChannelView::dense(spec.in_channels);
        self.stem.conv.out_active = spec.stem_channels;
        self.stem.bn.active = spec.stem_channels;

        for k in 0..4 {
            let st = &mut self.enc[k];
            let in_a = if k == 0 {
                spec.stem_channels
            } else {
                enc_a[k - 1]
            };
            st.down.conv.in_view = ChannelView::dense(in_a);
            st.down.conv.out_active = enc_a[k];
            st.down.bn.active = enc_a[k];
            st.active_blocks = spec.stage_depths[k];
            for b in &mut st.blocks {
                slice_block(
                    b,
                    &[ChanSeg {
                        phys: 0,
                        len: enc_a[k],
                    }],
                    enc_a[k],
                );
            }
        }
        for k in 0..4 {
            let in_a = if k == 0 { enc_a[3] } else { dec_a[k - 1] };
            let skip_a = match k {
                0..=2 => enc_a[2 - k],
                _ => spec.stem_channels,
            };
            let skip_phys = match k {
                0..=2 => enc_max[2 - k],
                _ => self.max.stem_channels,
            };
            let st = &mut self.dec[k];
            st.up.conv.in_view = ChannelView::dense(in_a);
            st.up.conv.out_active = dec_a[k];
            st.up.bn.active = dec_a[k];
            st.active_blocks = spec.stage_depths[4 + k];
            let cat_view = vec![
                ChanSeg {
                    phys: 0,
                    len: dec_a[k],
                },
                ChanSeg {
                    phys: dec_max[k],
                    len: skip_a,
                },
            ];
            let _ = skip_phys; // the skip segment starts after the stage's own physical width
            for (i, b) in st.blocks.iter_mut().enumerate() {
                if i == 0 {
                    slice_block(b, &cat_view, dec_a[k]);
                } else {
                    slice_block(
                        b,
                        &[ChanSeg {
                            phys: 0,
                            len: dec_a[k],
                        }],
                        dec_a[k],
                    );
                }
            }
        }

        if let Some(mlps) = &mut self.point_mlps {
            let dims = [
                (spec.in_channels, spec.stem_channels),
                (spec.stem_channels, enc_a[3]),
                (enc_a[3], dec_a[1]),
                (dec_a[1], dec_a[3]),
            ];
            for (p, &(cin, cout)) in mlps.iter_mut().zip(&dims) {
                p.linear.in_view = ChannelView::dense(cin);
                p.linear.out_active = cout;
                p.bn.active = cout;
            }
        }

        self.classifier.in_view = ChannelView::dense(dec_a[3]);
        self.active = spec.clone();
        Ok(())
    }
}

fn slice_block(block: &mut ResidualBlock, in_segs: &[ChanSeg], out: usize) {
    block.conv1.in_view = ChannelView {
        segs: in_segs.to_vec(),
    };
    block.conv1.out_active = out;
    block.bn1.active = out;
    block.conv2.in_view = ChannelView::dense(out);
    block.conv2.out_active = out;
    block.bn2.active = out;
    if let Some(p) = &mut block.skip {
        p.linear.in_view = ChannelView {
            segs: in_segs.to_vec(),
        };
        p.linear.out_active = out;
        p.bn.active = out;
    }
}

impl NetworkInstance {
    pub fn family(&self) -> Family {
        self.topo.family
    }

    pub fn param_count(&self) -> usize {
        self.params.param_elements()
    }

    /// Learnable elements belonging to the point branches alone.
    pub fn point_branch_param_count(&self) -> usize {
        match &self.topo.point_mlps {
            None => 0,
            Some(mlps) => mlps
                .iter()
                .flat_map(|p| {
                    [
                        self.params.get(p.linear.weight).len(),
                        p.linear.bias.map_or(0, |b| self.params.get(b).len()),
                        self.params.get(p.bn.gamma).len(),
                        self.params.get(p.bn.beta).len(),
                    ]
                })
                .sum(),
        }
    }

    pub fn apply_slice(&mut self, spec: &ArchSpec) -> Result<(), BackboneError> {
        self.topo.apply_slice(spec)
    }

    /// Training forward pass; returns per-point logits and the tape.
    pub fn forward_train(
        &self,
        points: &PointTensor,
        pipe: &ScenePipeline,
    ) -> Result<(FeatureMatrix, NetTape), BackboneError> {
        forward_train_parts(&self.topo, &self.params, points, pipe)
    }

    /// Inference forward pass (running statistics, no tape).
    pub fn forward_eval(
        &self,
        points: &PointTensor,
        pipe: &ScenePipeline,
    ) -> Result<EvalOutput, BackboneError> {
        forward_eval_parts(&self.topo, &self.params, points, pipe)
    }
}

/// Training forward over explicit topology and parameter store; lets worker
/// threads share one read-only store while holding their own sliced
/// topologies.
pub fn forward_train_parts(
    topo: &NetTopology,
    ps: &TensorStore,
    points: &PointTensor,
    pipe: &ScenePipeline,
) -> Result<(FeatureMatrix, NetTape), BackboneError> {
    forward_impl::<true>(topo, ps, points, pipe)
        .map(|(logits, tape, _)| (logits, tape.expect("training tape")))
}

/// Inference forward over explicit topology and parameter store.
pub fn forward_eval_parts(
    topo: &NetTopology,
    ps: &TensorStore,
    points: &PointTensor,
    pipe: &ScenePipeline,
) -> Result<EvalOutput, BackboneError> {
    forward_impl::<false>(topo, ps, points, pipe).map(|(logits, _, norms)| EvalOutput {
        logits,
        final_point_norms: norms,
    })
}

/// Shared forward skeleton. `TRAIN` chooses batch vs running statistics
/// and whether activations are saved.
#[allow(clippy::type_complexity)]
fn forward_impl<const TRAIN: bool>(
    topo: &NetTopology,
    ps: &TensorStore,
    points: &PointTensor,
    pipe: &ScenePipeline,
) -> Result<(FeatureMatrix, Option<NetTape>, Option<Vec<f32>>), BackboneError> {
    if points.is_empty() {
        return Err(BackboneError::EmptyScene);
    }
    let t = topo;
    let v = pipe.voxel_size;
    let mlps = t.point_mlps.as_ref();
    let mut mlp_ctxs = Vec::new();
    let mut final_norms = None;

    // Point branch helper: fuse `mlp(point_feats)` into `acc`.
    let run_mlp = |idx: usize,
                   x: &FeatureMatrix,
                   acc: &mut FeatureMatrix,
                   ctxs: &mut Vec<PointBranchCtx>,
                   norms_out: &mut Option<Vec<f32>>|
     -> Result<(), BackboneError> {
        if let Some(mlps) = mlps {
            let out = if TRAIN {
                let (out, ctx) = mlps[idx].forward_train(ps, x)?;
                ctxs.push(ctx);
                out
            } else {
                mlps[idx].forward_eval(ps, x)?
            };
            if idx == 3 {
                *norms_out = Some(feature_norms(&out));
            }
            acc.add_assign(&out);
        }
        Ok(())
    };

    // Wrap 1: stem at stride 1.
    let vox0 = voxelize_features(&points.features, &pipe.point_maps[0])?;
    let (s_out, stem_ctx) = if TRAIN {
        let (o, c) = t.stem.forward_train(ps, &vox0, &pipe.sub_maps[0])?;
        (o, Some(c))
    } else {
        (t.stem.forward_eval(ps, &vox0, &pipe.sub_maps[0])?, None)
    };
    let mut z0 = devox_level(points, pipe, 0, &s_out, v);
    run_mlp(
        0,
        &points.features,
        &mut z0,
        &mut mlp_ctxs,
        &mut final_norms,
    )?;

    // Wrap 2: the four encoder stages.
    let e_in = voxelize_features(&z0, &pipe.point_maps[0])?;
    let mut enc_ctxs = Vec::new();
    let mut enc_outs: Vec<FeatureMatrix> = Vec::with_capacity(4);
    let mut cur = e_in;
    for k in 0..4 {
        let stage = &t.enc[k];
        let (after_down, down_ctx) = if TRAIN {
            let (o, c) = stage.down.forward_train(ps, &cur, &pipe.down_maps[k])?;
            (o, Some(c))
        } else {
            (stage.down.forward_eval(ps, &cur, &pipe.down_maps[k])?, None)
        };
        let mut x = after_down;
        let mut bctxs = Vec::new();
        for b in &stage.blocks[..stage.active_blocks] {
            if TRAIN {
                let (o, c) = b.forward_train(ps, &x, &pipe.sub_maps[k + 1])?;
                bctxs.push(c);
                x = o;
            } else {
                x = b.forward_eval(ps, &x, &pipe.sub_maps[k + 1])?;
            }
        }
        if TRAIN {
            enc_ctxs.push(EncStageCtx {
                down: down_ctx.expect("train ctx"),
                blocks: bctxs,
            });
        }
        enc_outs.push(x.clone());
        cur = x;
    }
    let mut z1 = devox_level(points, pipe, 4, &cur, v);
    run_mlp(1, &z0, &mut z1, &mut mlp_ctxs, &mut final_norms)?;

    // Wrap 3: decoder stages 0-1 (strides 16 -> 4).
    let mut dec_ctxs = Vec::new();
    let d_in = voxelize_features(&z1, &pipe.point_maps[4])?;
    let mut x = d_in;
    for k in 0..2 {
        x = run_dec_stage::<TRAIN>(topo, ps, k, &x, &enc_outs, &s_out, pipe, &mut dec_ctxs)?;
    }
    let mut z2 = devox_level(points, pipe, 2, &x, v);
    run_mlp(2, &z1, &mut z2, &mut mlp_ctxs, &mut final_norms)?;

    // Wrap 4: decoder stages 2-3 (strides 4 -> 1).
    let y_in = voxelize_features(&z2, &pipe.point_maps[2])?;
    let mut x = y_in;
    for k in 2..4 {
        x = run_dec_stage::<TRAIN>(topo, ps, k, &x, &enc_outs, &s_out, pipe, &mut dec_ctxs)?;
    }
    let mut z3 = devox_level(points, pipe, 0, &x, v);
    run_mlp(3, &z2, &mut z3, &mut mlp_ctxs, &mut final_norms)?;

    let logits = t.classifier.forward(ps, &z3)?;
    let tape = TRAIN.then(|| NetTape {
        stem: stem_ctx.expect("train ctx"),
        enc: enc_ctxs,
        dec: dec_ctxs,
        mlps: mlps.map(|_| mlp_ctxs),
        classifier_in: z3,
    });
    Ok((logits, tape, final_norms))
}

#[allow(clippy::too_many_arguments)]
fn run_dec_stage<const TRAIN: bool>(
    topo: &NetTopology,
    ps: &TensorStore,
    k: usize,
    x: &FeatureMatrix,
    enc_outs: &[FeatureMatrix],
    stem_out: &FeatureMatrix,
    pipe: &ScenePipeline,
    ctxs: &mut Vec<DecStageCtx>,
) -> Result<FeatureMatrix, BackboneError> {
    let t = topo;
    let stage = &t.dec[k];
    // Decoder stage k upsamples level 4-k to 3-k.
    let up_map = &pipe.up_maps[3 - k];
    let sub_map = &pipe.sub_maps[3 - k];
    let skip: &FeatureMatrix = match k {
        0..=2 => &enc_outs[2 - k],
        _ => stem_out,
    };
    let (u, up_ctx) = if TRAIN {
        let (o, c) = stage.up.forward_train(ps, x, up_map)?;
        (o, Some(c))
    } else {
        (stage.up.forward_eval(ps, x, up_map)?, None)
    };
    let up_cols = u.cols();
    let mut cur = FeatureMatrix::hcat(&u, skip);
    let mut bctxs = Vec::new();
    for b in &stage.blocks[..stage.active_blocks] {
        if TRAIN {
            let (o, c) = b.forward_train(ps, &cur, sub_map)?;
            bctxs.push(c);
            cur = o;
        } else {
            cur = b.forward_eval(ps, &cur, sub_map)?;
        }
    }
    if TRAIN {
        ctxs.push(DecStageCtx {
            up: up_ctx.expect("train ctx"),
            up_cols,
            blocks: bctxs,
        });
    }
    Ok(cur)
}

/// Backward pass over a training tape. Accumulates parameter gradients
/// into `gs` and returns the gradient w.r.t. the input point features.
pub fn backward_parts(
    topo: &NetTopology,
    ps: &TensorStore,
    points: &PointTensor,
    pipe: &ScenePipeline,
    tape: &NetTape,
    grad_logits: &FeatureMatrix,
    gs: &mut TensorStore,
) -> FeatureMatrix {
    let t = topo;

    let g_z3 = t
        .classifier
        .backward(ps, &tape.classifier_in, grad_logits, gs);

    // Unfuse wrap 4.
    let (g_dec3_out, g_z2_mlp) = unfuse(topo, ps, points, pipe, 0, &g_z3, 3, tape, gs);
    let (g_y_in, g_skip_d3) = dec_stage_backward(topo, ps, 3, &g_dec3_out, pipe, &tape.dec[3], gs);
    let (g_x2, g_skip_d2) = dec_stage_backward(topo, ps, 2, &g_y_in, pipe, &tape.dec[2], gs);
    let mut g_z2 = voxelize_backward(&g_x2, &pipe.point_maps[2]);
    if let Some(g) = g_z2_mlp {
        g_z2.add_assign(&g);
    }

    // Unfuse wrap 3.
    let (g_dec1_out, g_z1_mlp) = unfuse(topo, ps, points, pipe, 2, &g_z2, 2, tape, gs);
    let (g_x1, g_skip_d1) = dec_stage_backward(topo, ps, 1, &g_dec1_out, pipe, &tape.dec[1], gs);
    let (g_d_in, g_skip_d0) = dec_stage_backward(topo, ps, 0, &g_x1, pipe, &tape.dec[0], gs);
    let mut g_z1 = voxelize_backward(&g_d_in, &pipe.point_maps[4]);
    if let Some(g) = g_z1_mlp {
        g_z1.add_assign(&g);
    }

    // Unfuse wrap 2 and run the encder chain with skip gradients.
    let (mut g_enc_out, g_z0_mlp) = unfuse(topo, ps, points, pipe, 4, &g_z1, 1, tape, gs);
    let skip_grads = [g_skip_d2, g_skip_d1, g_skip_d0];
    for k in (0..4).rev() {
        // Skip gradient reaching this stage's output, if any: decoder
        // stage 2-k consumed encoder stage k's output.
        if k <= 2 {
            g_enc_out.add_assign(&skip_grads[k]);
        }
        let stage = &t.enc[k];
        let ctx = &tape.enc[k];
        let mut g = g_enc_out;
        for (b, bctx) in stage.blocks[..stage.active_blocks]
            .iter()
            .zip(&ctx.blocks)
            .rev()
        {
            g = b.backward(ps, bctx, &g, &pipe.sub_maps[k + 1], gs);
        }
        g_enc_out = stage
            .down
            .backward(ps, &ctx.down, &g, &pipe.down_maps[k], gs);
    }
    let mut g_z0 = voxelize_backward(&g_enc_out, &pipe.point_maps[0]);
    if let Some(g) = g_z0_mlp {
        g_z0.add_assign(&g);
    }

    // Unfuse wrap 1; stem also receives the decoder-3 skip gradient.
    let (mut g_s_out, g_f0_mlp) = unfuse(topo, ps, points, pipe, 0, &g_z0, 0, tape, gs);
    g_s_out.add_assign(&g_skip_d3);
    let g_vox0 = t
        .stem
        .backward(ps, &tape.stem, &g_s_out, &pipe.sub_maps[0], gs);
    let mut g_f0 = voxelize_backward(&g_vox0, &pipe.point_maps[0]);
    if let Some(g) = g_f0_mlp {
        g_f0.add_assign(&g);
    }
    g_f0
}

/// Splits a fused point gradient into the devoxelize scatter at `level`
/// and, for the point-voxel family, the point-branch input gradient.
#[allow(clippy::too_many_arguments)]
fn unfuse(
    topo: &NetTopology,
    ps: &TensorStore,
    points: &PointTensor,
    pipe: &ScenePipeline,
    level: usize,
    grad_fused: &FeatureMatrix,
    mlp_idx: usize,
    tape: &NetTape,
    gs: &mut TensorStore,
) -> (FeatureMatrix, Option<FeatureMatrix>) {
    let lv = &pipe.levels[level];
    let g_vox = scatter_devoxelize_grad(
        &points.positions,
        &points.batch,
        lv.coords.len(),
        pipe.voxel_size,
        lv.stride,
        &lv.hash,
        grad_fused,
    );
    let g_mlp = match (&topo.point_mlps, &tape.mlps) {
        (Some(mlps), Some(ctxs)) => {
            Some(mlps[mlp_idx].backward(ps, &ctxs[mlp_idx], grad_fused, gs))
        }
        _ => None,
    };
    (g_vox, g_mlp)
}

fn dec_stage_backward(
    topo: &NetTopology,
    ps: &TensorStore,
    k: usize,
    grad_out: &FeatureMatrix,
    pipe: &ScenePipeline,
    ctx: &DecStageCtx,
    gs: &mut TensorStore,
) -> (FeatureMatrix, FeatureMatrix) {
    let t = topo;
    let stage = &t.dec[k];
    let sub_map = &pipe.sub_maps[3 - k];
    let up_map = &pipe.up_maps[3 - k];
    let mut g = grad_out.clone();
    for (b, bctx) in stage.blocks[..stage.active_blocks]
        .iter()
        .zip(&ctx.blocks)
        .rev()
    {
        g = b.backward(ps, bctx, &g, sub_map, gs);
    }
    let (g_up, g_skip) = g.hsplit(ctx.up_cols);
    let g_prev = stage.up.backward(ps, &ctx.up, &g_up, up_map, gs);
    (g_prev, g_skip)
}

/// Batch statistics saved on the tape, in the fixed tape order matching
/// [`bn_layers_of`]. A single-worker trainer applies them directly; a
/// multi-worker reducer folds each worker's statistics in worker order.
pub fn collect_bn_stats(tape: &NetTape) -> Vec<BnStats> {
    let mut out = Vec::new();
    out.push(tape.stem.stats.clone());
    for ctx in &tape.enc {
        out.push(ctx.down.stats.clone());
        for b in &ctx.blocks {
            out.push(b.s1.clone());
            out.push(b.s2.clone());
            if let Some((_, sb)) = &b.skip_out {
                out.push(sb.clone());
            }
        }
    }
    for ctx in &tape.dec {
        out.push(ctx.up.stats.clone());
        for b in &ctx.blocks {
            out.push(b.s1.clone());
            out.push(b.s2.clone());
            if let Some((_, sb)) = &b.skip_out {
                out.push(sb.clone());
            }
        }
    }
    if let Some(ctxs) = &tape.mlps {
        for c in ctxs {
            out.push(c.stats.clone());
        }
    }
    out
}

/// Active batch-norm layers in tape order (the order [`collect_bn_stats`]
/// emits statistics in).
pub fn bn_layers_of(t: &NetTopology) -> Vec<BatchNormLayer> {
    let mut out = Vec::new();
    out.push(t.stem.bn.clone());
    for (k, stage) in t.enc.iter().enumerate() {
        let _ = k;
        out.push(stage.down.bn.clone());
        for b in &stage.blocks[..stage.active_blocks] {
            out.push(b.bn1.clone());
            out.push(b.bn2.clone());
            if let Some(p) = &b.skip {
                out.push(p.bn.clone());
            }
        }
    }
    for stage in &t.dec {
        out.push(stage.up.bn.clone());
        for b in &stage.blocks[..stage.active_blocks] {
            out.push(b.bn1.clone());
            out.push(b.bn2.clone());
            if let Some(p) = &b.skip {
                out.push(p.bn.clone());
            }
        }
    }
    if let Some(mlps) = &t.point_mlps {
        for p in mlps {
            out.push(p.bn.clone());
        }
    }
    out
}

impl NetworkInstance {
    /// Backward pass over a training tape (convenience over
    /// [`backward_parts`]).
    pub fn backward(
        &self,
        points: &PointTensor,
        pipe: &ScenePipeline,
        tape: &NetTape,
        grad_logits: &FeatureMatrix,
        gs: &mut TensorStore,
    ) -> FeatureMatrix {
        backward_parts(
            &self.topo,
            &self.params,
            points,
            pipe,
            tape,
            grad_logits,
            gs,
        )
    }

    /// Active batch-norm layers in tape order.
    pub fn bn_layers_in_tape_order(&self) -> Vec<BatchNormLayer> {
        bn_layers_of(&self.topo)
    }

    /// Applies one EMA update per BN layer from already-averaged statistics.
    pub fn apply_bn_stats(&mut self, stats: &[BnStats]) {
        let layers = bn_layers_of(&self.topo);
        assert_eq!(layers.len(), stats.len(), "one statistic per BN layer");
        for (layer, s) in layers.iter().zip(stats) {
            layer.update_running(&mut self.params, s);
        }
    }

    /// Overwrites BN running statistics from already-averaged statistics
    /// (used by calibration after slicing).
    pub fn set_bn_stats(&mut self, stats: &[BnStats]) {
        let layers = self.bn_layers_in_tape_order();
        assert_eq!(layers.len(), stats.len());
        for (layer, s) in layers.iter().zip(stats) {
            layer.set_running(&mut self.params, &s.mean, &s.var);
        }
    }
}

fn devox_level(
    points: &PointTensor,
    pipe: &ScenePipeline,
    level: usize,
    feats: &FeatureMatrix,
    v: f32,
) -> FeatureMatrix {
    let lv = &pipe.levels[level];
    devoxelize_rows(
        &points.positions,
        &points.batch,
        feats,
        v,
        lv.stride,
        &lv.hash,
    )
}

/// Per-point segmentation logits for a standalone scene (builds the
/// coordinate pipeline, runs inference).
pub fn forward_segmentation(
    net: &NetworkInstance,
    points: &PointTensor,
) -> Result<FeatureMatrix, BackboneError> {
    if points.is_empty() {
        return Err(BackboneError::EmptyScene);
    }
    let pipe = ScenePipeline::build(
        &points.positions,
        &points.batch,
        net.topo.active.voxel_size as f32,
    )?;
    Ok(net.forward_eval(points, &pipe)?.logits)
}

/// Copies the active parameter slice of `src` into a standalone network
/// `dst` whose physical shape equals the slice. Running statistics come too,
/// so the copy's inference output is bit-identical to the sliced source.
pub fn copy_active_params(
    src_topo: &NetTopology,
    src_params: &TensorStore,
    dst: &mut NetworkInstance,
) {
    assert_eq!(
        src_topo.active, dst.topo.max,
        "destination must match slice"
    );
    let mut pairs: Vec<CopyJob> = Vec::new();
    collect_copy_jobs(src_topo, &dst.topo, &mut pairs);
    for job in pairs {
        job.run(src_params, &mut dst.params);
    }
}

enum CopyJob {
    /// (src id, dst id, src in_max, dst in_max, src view, out_active, matrices)
    Matrix {
        src: crate::nn::ParamId,
        dst: crate::nn::ParamId,
        src_in_max: usize,
        dst_in_max: usize,
        src_view: ChannelView,
        out_active: usize,
        matrices: usize,
    },
    Vector {
        src: crate::nn::ParamId,
        dst: crate::nn::ParamId,
        len: usize,
    },
}

impl CopyJob {
    fn run(&self, src_ps: &TensorStore, dst_ps: &mut TensorStore) {
        match self {
            CopyJob::Matrix {
                src,
                dst,
                src_in_max,
                dst_in_max,
                src_view,
                out_active,
                matrices,
            } => {
                let s = src_ps.get(*src);
                let d = dst_ps.get_mut(*dst);
                let src_out_max = s.len() / (matrices * src_in_max);
                let dst_out_max = d.len() / (matrices * dst_in_max);
                for m in 0..*matrices {
                    for oc in 0..*out_active {
                        let srow = (m * src_out_max + oc) * src_in_max;
                        let drow = (m * dst_out_max + oc) * dst_in_max;
                        let mut dcol = 0;
                        for seg in &src_view.segs {
                            d[drow + dcol..drow + dcol + seg.len]
                                .copy_from_slice(&s[srow + seg.phys..srow + seg.phys + seg.len]);
                            dcol += seg.len;
                        }
                    }
                }
            }
            CopyJob::Vector { src, dst, len } => {
                let s = src_ps.get(*src);
                let d = dst_ps.get_mut(*dst);
                d[..*len].copy_from_slice(&s[..*len]);
            }
        }
    }
}

fn conv_jobs(src: &SparseConvLayer, dst: &SparseConvLayer, out: &mut Vec<CopyJob>) {
    out.push(CopyJob::Matrix {
        src: src.weight,
        dst: dst.weight,
        src_in_max: src.in_max,
        dst_in_max: dst.in_max,
        src_view: src.in_view.clone(),
        out_active: src.out_active,
        matrices: crate::conv::KERNEL_VOLUME,
    });
}

fn linear_jobs(src: &LinearLayer, dst: &LinearLayer, out: &mut Vec<CopyJob>) {
    out.push(CopyJob::Matrix {
        src: src.weight,
        dst: dst.weight,
        src_in_max: src.in_max,
        dst_in_max: dst.in_max,
        src_view: src.in_view.clone(),
        out_active: src.out_active,
        matrices: 1,
    });
    if let (Some(sb), Some(db)) = (src.bias, dst.bias) {
        out.push(CopyJob::Vector {
            src: sb,
            dst: db,
            len: src.out_active,
        });
    }
}

fn bn_jobs(src: &BatchNormLayer, dst: &BatchNormLayer, out: &mut Vec<CopyJob>) {
    for (s, d) in [
        (src.gamma, dst.gamma),
        (src.beta, dst.beta),
        (src.running_mean, dst.running_mean),
        (src.running_var, dst.running_var),
    ] {
        out.push(CopyJob::Vector {
            src: s,
            dst: d,
            len: src.active,
        });
    }
}

fn block_jobs(src: &ResidualBlock, dst: &ResidualBlock, out: &mut Vec<CopyJob>) {
    conv_jobs(&src.conv1, &dst.conv1, out);
    bn_jobs(&src.bn1, &dst.bn1, out);
    conv_jobs(&src.conv2, &dst.conv2, out);
    bn_jobs(&src.bn2, &dst.bn2, out);
    match (&src.skip, &dst.skip) {
        (Some(s), Some(d)) => {
            linear_jobs(&s.linear, &d.linear, out);
            bn_jobs(&s.bn, &d.bn, out);
        }
        (None, None) => {}
        // A sliced source block can carry a projection the standalone
        // destination does not need (equal widths); the projection then acts
        // on the residual path that the destination realizes as identity —
        // impossible by construction because decoder block0 always projects
        // and other blocks never do.
        _ => unreachable!("projection layout must match"),
    }
}

fn collect_copy_jobs(src: &NetTopology, dst: &NetTopology, out: &mut Vec<CopyJob>) {
    conv_jobs(&src.stem.conv, &dst.stem.conv, out);
    bn_jobs(&src.stem.bn, &dst.stem.bn, out);
    for (s, d) in src.enc.iter().zip(&dst.enc) {
        conv_jobs(&s.down.conv, &d.down.conv, out);
        bn_jobs(&s.down.bn, &d.down.bn, out);
        for (sb, db) in s.blocks[..s.active_blocks].iter().zip(&d.blocks) {
            block_jobs(sb, db, out);
        }
    }
    for (s, d) in src.dec.iter().zip(&dst.dec) {
        conv_jobs(&s.up.conv, &d.up.conv, out);
        bn_jobs(&s.up.bn, &d.up.bn, out);
        for (sb, db) in s.blocks[..s.active_blocks].iter().zip(&d.blocks) {
            block_jobs(sb, db, out);
        }
    }
    match (&src.point_mlps, &dst.point_mlps) {
        (Some(s), Some(d)) => {
            for (sp, dp) in s.iter().zip(d) {
                linear_jobs(&sp.linear, &dp.linear, out);
                bn_jobs(&sp.bn, &dp.bn, out);
            }
        }
        (None, None) => {}
        _ => panic!("families must match to copy parameters"),
    }
    linear_jobs(&src.classifier, &dst.classifier, out);
}
