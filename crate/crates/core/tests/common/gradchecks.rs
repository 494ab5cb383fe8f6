//! Per-operation gradient checks shared by the development test target and
//! the acceptance suite: analytic f32 backward passes against central finite
//! differences of the 64-bit reference forwards.

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spvox_core::conv::{build_kernel_map_stride1, ResidualBlock, SparseConvLayer};
use spvox_core::coords::{
    build_hash_map, scatter_devoxelize_grad, voxelize_backward, voxelize_coords, voxelize_features,
    PointTensor,
};
use spvox_core::nn::{
    cross_entropy, relu_backward, relu_forward, BatchNormLayer, FeatureMatrix, LinearLayer,
    ParamId, TensorStore,
};
use spvox_core::spvconv::SpvConvModule;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> FeatureMatrix {
    let mut m = FeatureMatrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    m
}

fn randomize_params(ps: &mut TensorStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id).to_string();
        if name.ends_with("running_mean") || name.ends_with("running_var") {
            continue;
        }
        for v in ps.get_mut(id) {
            *v = rng.random_range(-0.8..0.8);
        }
        if name.ends_with("gamma") {
            // Keep scales away from zero so losses stay well-conditioned.
            for v in ps.get_mut(id) {
                *v = 0.5 + v.abs();
            }
        }
    }
}

/// Checks a spread of parameter coordinates; coordinates whose finite
/// difference would straddle a ReLU kink are skipped, but at least 80% of
/// the inspected coordinates must be checkable.
fn check_params(ps: &TensorStore, gs: &TensorStore, ids: &[ParamId], loss64: impl Fn(&P64) -> f64) {
    let (mut checked, mut skipped) = (0usize, 0usize);
    for &id in ids {
        let len = ps.get(id).len();
        for idx in spread_indices(len, 12) {
            let Some(numeric) = central_diff_guarded(|d| loss64(&P64::with(ps, id, idx, d))) else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let analytic = gs.get(id)[idx] as f64;
            assert!(
                grad_close(analytic, numeric),
                "param `{}`[{idx}]: analytic {analytic}, numeric {numeric}",
                ps.name(id)
            );
        }
    }
    assert!(
        checked * 4 >= (checked + skipped) * 3,
        "too many kink-straddling coordinates ({skipped} of {})",
        checked + skipped
    );
}

fn check_inputs(grad_in: &FeatureMatrix, loss64_at: impl Fn(usize, usize, f64) -> f64) {
    let (mut checked, mut skipped) = (0usize, 0usize);
    for r in 0..grad_in.rows() {
        for c in 0..grad_in.cols() {
            let Some(numeric) = central_diff_guarded(|d| loss64_at(r, c, d)) else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let analytic = grad_in.get(r, c) as f64;
            assert!(
                grad_close(analytic, numeric),
                "input[{r}][{c}]: analytic {analytic}, numeric {numeric}"
            );
        }
    }
    assert!(
        checked * 4 >= (checked + skipped) * 3,
        "too many kink-straddling coordinates ({skipped} of {})",
        checked + skipped
    );
}

pub fn linear_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (rows, cin, cout) = (
            rng.random_range(3..7),
            rng.random_range(2..6),
            rng.random_range(2..5),
        );
        let mut ps = TensorStore::new();
        let layer = LinearLayer::new(&mut ps, "lin", cin, cout, true);
        randomize_params(&mut ps, &mut rng);
        let x = rand_matrix(&mut rng, rows, cin, -1.0, 1.0);
        let proj = M64::from_f32(&rand_matrix(&mut rng, rows, cout, -1.0, 1.0));

        let mut gs = ps.zeros_like();
        let proj32 =
            FeatureMatrix::from_vec(rows, cout, proj.data.iter().map(|&v| v as f32).collect());
        let grad_in = layer.backward(&ps, &x, &proj32, &mut gs);

        let x64 = M64::from_f32(&x);
        let loss = |p: &P64| proj_loss(&linear64(p, &layer, &x64), &proj);
        check_params(&ps, &gs, &[layer.weight, layer.bias.unwrap()], loss);
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&linear64(&P64::new(&ps), &layer, &xp), &proj)
        });
    }
}

pub fn batchnorm_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (rows, ch) = (rng.random_range(5..10), rng.random_range(2..5));
        let mut ps = TensorStore::new();
        let bn = BatchNormLayer::new(&mut ps, "bn", ch);
        randomize_params(&mut ps, &mut rng);
        let x = rand_matrix(&mut rng, rows, ch, -2.0, 2.0);
        let proj = M64::from_f32(&rand_matrix(&mut rng, rows, ch, -1.0, 1.0));

        let (_, stats) = bn.forward_train(&ps, &x).unwrap();
        let proj32 =
            FeatureMatrix::from_vec(rows, ch, proj.data.iter().map(|&v| v as f32).collect());
        let mut gs = ps.zeros_like();
        let grad_in = bn
            .backward(&ps, &x, Some(&stats), &proj32, &mut gs)
            .unwrap();

        let x64 = M64::from_f32(&x);
        let loss = |p: &P64| proj_loss(&bn64(p, &bn, &x64), &proj);
        check_params(&ps, &gs, &[bn.gamma, bn.beta], loss);
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&bn64(&P64::new(&ps), &bn, &xp), &proj)
        });
    }
}

pub fn relu_gradients_match_away_from_the_kink(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (rows, ch) = (4, 5);
        // Sample magnitudes above 1e-2 so the finite difference never
        // straddles the kink.
        let mut x = FeatureMatrix::zeros(rows, ch);
        for v in x.data_mut() {
            let mag = rng.random_range(0.05..1.0);
            *v = if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            };
        }
        let proj = rand_matrix(&mut rng, rows, ch, -1.0, 1.0);
        let _ = relu_forward(&x);
        let grad_in = relu_backward(&x, &proj);
        let x64 = M64::from_f32(&x);
        let proj64 = M64::from_f32(&proj);
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&relu64(&xp), &proj64)
        });
    }
}

pub fn cross_entropy_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (rows, classes) = (6, 4);
        let logits = rand_matrix(&mut rng, rows, classes, -2.0, 2.0);
        let labels: Vec<u32> = (0..rows)
            .map(|_| rng.random_range(0..classes as u32))
            .collect();
        let (_, grad) = cross_entropy(&logits, &labels, None).unwrap();
        let l64 = M64::from_f32(&logits);
        check_inputs(&grad, |r, c, d| {
            let mut lp = l64.clone();
            lp.set(r, c, lp.get(r, c) + d);
            ce64(&lp, &labels, None)
        });
    }
}

pub fn voxelize_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(20..40);
        let positions: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let feats = rand_matrix(&mut rng, n, 3, -1.0, 1.0);
        let points = PointTensor::new(positions, feats.clone(), vec![0; n]);
        let (_, vmap) = voxelize_coords(&points, 0.5).unwrap();
        let voxels = voxelize_features(&feats, &vmap).unwrap();

        let proj = M64::from_f32(&rand_matrix(&mut rng, voxels.rows(), 3, -1.0, 1.0));
        let proj32 = FeatureMatrix::from_vec(
            voxels.rows(),
            3,
            proj.data.iter().map(|&v| v as f32).collect(),
        );
        let grad_in = voxelize_backward(&proj32, &vmap);
        let x64 = M64::from_f32(&feats);
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&voxelize64(&xp, &vmap), &proj)
        });
    }
}

pub fn devoxelize_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        // Active voxels on a small lattice; query points well inside cells.
        let mut coords = Vec::new();
        for x in -2..2 {
            for y in -2..2 {
                for z in 0..2 {
                    if rng.random_range(0.0..1.0) < 0.7 {
                        coords.push(spvox_core::coords::Coord::new(0, x, y, z));
                    }
                }
            }
        }
        let hash = build_hash_map(&coords).unwrap();
        let feats = rand_matrix(&mut rng, coords.len(), 2, -1.0, 1.0);
        let v = 0.5f32;
        let n = 25;
        let positions: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    (rng.random_range(-2..1) as f32 + rng.random_range(0.1..0.9)) * v,
                    (rng.random_range(-2..1) as f32 + rng.random_range(0.1..0.9)) * v,
                    (rng.random_range(0..1) as f32 + rng.random_range(0.1..0.9)) * v,
                ]
            })
            .collect();
        let batch = vec![0; n];

        let proj = M64::from_f32(&rand_matrix(&mut rng, n, 2, -1.0, 1.0));
        let proj32 = FeatureMatrix::from_vec(n, 2, proj.data.iter().map(|&v| v as f32).collect());
        let grad_voxels =
            scatter_devoxelize_grad(&positions, &batch, coords.len(), v, 1, &hash, &proj32);

        let f64s = M64::from_f32(&feats);
        for r in 0..coords.len() {
            for c in 0..2 {
                let numeric = central_diff(|d| {
                    let mut fp = f64s.clone();
                    fp.set(r, c, fp.get(r, c) + d);
                    proj_loss(
                        &devox64(&positions, &batch, &coords, &fp, v as f64, 1),
                        &proj,
                    )
                });
                let analytic = grad_voxels.get(r, c) as f64;
                assert!(
                    grad_close(analytic, numeric),
                    "voxel[{r}][{c}]: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }
}

pub fn sparse_conv_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..2 {
                    if rng.random_range(0.0..1.0) < 0.8 {
                        coords.push(spvox_core::coords::Coord::new(0, x, y, z));
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push(spvox_core::coords::Coord::new(0, 0, 0, 0));
        }
        let hash = build_hash_map(&coords).unwrap();
        let kmap = build_kernel_map_stride1(&coords, &hash, 1);

        let mut ps = TensorStore::new();
        let layer = SparseConvLayer::new(&mut ps, "conv", 3, 2, 1, false);
        randomize_params(&mut ps, &mut rng);
        let x = rand_matrix(&mut rng, coords.len(), 3, -1.0, 1.0);
        let proj = M64::from_f32(&rand_matrix(&mut rng, coords.len(), 2, -1.0, 1.0));
        let proj32 = FeatureMatrix::from_vec(
            coords.len(),
            2,
            proj.data.iter().map(|&v| v as f32).collect(),
        );
        let mut gs = ps.zeros_like();
        let grad_in = layer.backward(&ps, &x, &proj32, &kmap, &mut gs);

        let x64 = M64::from_f32(&x);
        check_params(&ps, &gs, &[layer.weight], |p| {
            proj_loss(&conv64(p, &layer, &x64, &kmap), &proj)
        });
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&conv64(&P64::new(&ps), &layer, &xp, &kmap), &proj)
        });
    }
}

pub fn residual_block_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                coords.push(spvox_core::coords::Coord::new(0, x, y, 0));
            }
        }
        let hash = build_hash_map(&coords).unwrap();
        let kmap = build_kernel_map_stride1(&coords, &hash, 1);

        // Odd seeds force the projected skip path (differing channel counts).
        let (cin, cout) = if seed % 2 == 0 { (3, 3) } else { (4, 2) };
        let mut ps = TensorStore::new();
        let block = ResidualBlock::new(&mut ps, "block", cin, cout, false);
        randomize_params(&mut ps, &mut rng);
        let x = rand_matrix(&mut rng, coords.len(), cin, -1.0, 1.0);
        let proj = M64::from_f32(&rand_matrix(&mut rng, coords.len(), cout, -1.0, 1.0));
        let proj32 = FeatureMatrix::from_vec(
            coords.len(),
            cout,
            proj.data.iter().map(|&v| v as f32).collect(),
        );

        let (_, ctx) = block.forward_train(&ps, &x, &kmap).unwrap();
        let mut gs = ps.zeros_like();
        let grad_in = block.backward(&ps, &ctx, &proj32, &kmap, &mut gs);

        let mut ids = vec![
            block.conv1.weight,
            block.bn1.gamma,
            block.bn1.beta,
            block.conv2.weight,
            block.bn2.gamma,
            block.bn2.beta,
        ];
        if let Some(p) = &block.skip {
            ids.push(p.linear.weight);
            ids.push(p.bn.gamma);
            ids.push(p.bn.beta);
        }
        let x64 = M64::from_f32(&x);
        check_params(&ps, &gs, &ids, |p| {
            proj_loss(&block64(p, &block, &x64, &kmap), &proj)
        });
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&block64(&P64::new(&ps), &block, &xp, &kmap), &proj)
        });
    }
}

pub fn spvconv_module_gradients_match_finite_differences(instances: u64) {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let n = 30;
        let v = 0.5f32;
        let positions: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    (rng.random_range(-2..2) as f32 + rng.random_range(0.1..0.9)) * v,
                    (rng.random_range(-2..2) as f32 + rng.random_range(0.1..0.9)) * v,
                    (rng.random_range(-1..1) as f32 + rng.random_range(0.1..0.9)) * v,
                ]
            })
            .collect();
        let feats = rand_matrix(&mut rng, n, 3, -1.0, 1.0);
        let points = PointTensor::new(positions.clone(), feats.clone(), vec![0; n]);
        let (coords, vmap) = voxelize_coords(&points, v).unwrap();
        let hash = build_hash_map(&coords).unwrap();
        let kmap = build_kernel_map_stride1(&coords, &hash, 1);

        let mut ps = TensorStore::new();
        let module = SpvConvModule::new(&mut ps, "spv", 3, 4, 2, v);
        randomize_params(&mut ps, &mut rng);

        let (_, ctx) = module
            .forward_train(&ps, &points, &vmap, &coords, &hash, &kmap)
            .unwrap();
        let proj = M64::from_f32(&rand_matrix(&mut rng, n, 4, -1.0, 1.0));
        let proj32 = FeatureMatrix::from_vec(n, 4, proj.data.iter().map(|&v| v as f32).collect());
        let mut gs = ps.zeros_like();
        let grad_in = module.backward(
            &ps, &points, &ctx, &proj32, &vmap, &coords, &hash, &kmap, &mut gs,
        );

        // 64-bit twin of the whole module.
        let x64 = M64::from_f32(&feats);
        let spv64 = |p: &P64, x: &M64| -> M64 {
            let mut cur = voxelize64(x, &vmap);
            for b in &module.blocks {
                cur = block64(p, b, &cur, &kmap);
            }
            let mut fused = devox64(&positions, &vec![0; n], &coords, &cur, v as f64, 1);
            let lin = linear64(p, &module.point_branch.linear, x);
            let pb = relu64(&bn64(p, &module.point_branch.bn, &lin));
            for (f, q) in fused.data.iter_mut().zip(&pb.data) {
                *f += *q;
            }
            fused
        };

        let mut ids = vec![
            module.point_branch.linear.weight,
            module.point_branch.bn.gamma,
            module.point_branch.bn.beta,
        ];
        for b in &module.blocks {
            ids.push(b.conv1.weight);
            ids.push(b.bn1.gamma);
            ids.push(b.conv2.weight);
            ids.push(b.bn2.beta);
            if let Some(p) = &b.skip {
                ids.push(p.linear.weight);
            }
        }
        check_params(&ps, &gs, &ids, |p| proj_loss(&spv64(p, &x64), &proj));
        check_inputs(&grad_in, |r, c, d| {
            let mut xp = x64.clone();
            xp.set(r, c, xp.get(r, c) + d);
            proj_loss(&spv64(&P64::new(&ps), &xp), &proj)
        });
    }
}

pub fn fused_gradient_is_the_sum_of_branch_gradients() {
    // The addition fans the upstream gradient unchanged into both branches:
    // zeroing one branch's parameters reproduces the other's standalone
    // gradients exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 20;
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let feats = rand_matrix(&mut rng, n, 2, -1.0, 1.0);
    let points = PointTensor::new(positions, feats, vec![0; n]);
    let (coords, vmap) = voxelize_coords(&points, 0.5).unwrap();
    let hash = build_hash_map(&coords).unwrap();
    let kmap = build_kernel_map_stride1(&coords, &hash, 1);

    let mut ps = TensorStore::new();
    let module = SpvConvModule::new(&mut ps, "spv", 2, 3, 1, 0.5);
    randomize_params(&mut ps, &mut rng);

    let grad_out = rand_matrix(&mut rng, n, 3, -1.0, 1.0);
    let (_, ctx) = module
        .forward_train(&ps, &points, &vmap, &coords, &hash, &kmap)
        .unwrap();
    let mut gs = ps.zeros_like();
    module.backward(
        &ps, &points, &ctx, &grad_out, &vmap, &coords, &hash, &kmap, &mut gs,
    );

    // The point branch alone sees the same upstream gradient.
    let (_, pctx) = module
        .point_branch
        .forward_train(&ps, &points.features)
        .unwrap();
    let mut gs_point = ps.zeros_like();
    module
        .point_branch
        .backward(&ps, &pctx, &grad_out, &mut gs_point);
    let id = module.point_branch.linear.weight;
    assert_eq!(gs.get(id), gs_point.get(id));
}
