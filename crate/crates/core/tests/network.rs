//! Backbone integration: construction, parameter accounting, equivariance,
//! family equivalence, MACs accounting, and weight-sharing consistency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spvox_core::backbone::{
    build_network, copy_active_params, count_macs, forward_eval_parts, forward_segmentation,
    macs_breakdown, ArchSpec, Family,
};
use spvox_core::coords::PointTensor;
use spvox_core::nas::{sample_uniform, SearchSpace, SuperNet};
use spvox_core::nn::FeatureMatrix;
use spvox_core::pipeline::{estimate_kernel_map_sizes, ScenePipeline};
use spvox_core::profile;

fn toy_spec() -> ArchSpec {
    ArchSpec {
        in_channels: 4,
        num_classes: 4,
        voxel_size: 0.25,
        stem_channels: 8,
        stage_channels: vec![8, 16, 16, 24, 16, 16, 8, 8],
        stage_depths: vec![1; 8],
    }
}

fn random_scene(n: usize, seed: u64, extent: f32) -> PointTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent / 4.0..extent / 4.0),
            ]
        })
        .collect();
    let mut feats = FeatureMatrix::zeros(n, 4);
    for i in 0..n {
        let row = feats.row_mut(i);
        row[0] = positions[i][0];
        row[1] = positions[i][1];
        row[2] = positions[i][2];
        row[3] = rng.random_range(0.0..1.0);
    }
    PointTensor::new(positions, feats, vec![0; n])
}

#[test]
fn minimal_spec_builds_and_produces_per_point_logits() {
    let spec = ArchSpec {
        in_channels: 4,
        num_classes: 4,
        voxel_size: 0.25,
        stem_channels: 8,
        stage_channels: vec![8; 8],
        stage_depths: vec![1; 8],
    };
    let net = build_network(&spec, Family::PointVoxel, 0).unwrap();
    let points = random_scene(100, 1, 3.0);
    let logits = forward_segmentation(&net, &points).unwrap();
    assert_eq!(logits.rows(), 100);
    assert_eq!(logits.cols(), 4);
    assert!(logits.is_finite());
}

#[test]
fn single_point_scene_runs_inference() {
    let net = build_network(&toy_spec(), Family::PointVoxel, 0).unwrap();
    let points = random_scene(1, 2, 1.0);
    let logits = forward_segmentation(&net, &points).unwrap();
    assert_eq!(logits.rows(), 1);
    assert!(logits.is_finite());
}

#[test]
fn empty_scene_is_rejected() {
    let net = build_network(&toy_spec(), Family::PointVoxel, 0).unwrap();
    let points = PointTensor::new(Vec::new(), FeatureMatrix::zeros(0, 4), Vec::new());
    assert!(forward_segmentation(&net, &points).is_err());
}

#[test]
fn family_parameter_counts_differ_by_exactly_the_point_branches() {
    let spec = toy_spec();
    let spv = build_network(&spec, Family::PointVoxel, 0).unwrap();
    let vox = build_network(&spec, Family::VoxelOnly, 0).unwrap();
    assert_eq!(
        spv.param_count() - vox.param_count(),
        spv.point_branch_param_count()
    );
    assert_eq!(vox.point_branch_param_count(), 0);
}

#[test]
fn parameter_count_matches_closed_form() {
    let spec = toy_spec();
    let net = build_network(&spec, Family::PointVoxel, 0).unwrap();

    // Analytic count assembled from the topology definition.
    let enc = spec.encoder_channels();
    let dec = spec.decoder_channels();
    let stem = spec.stem_channels;
    let conv = |cin: usize, cout: usize| 27 * cin * cout;
    let bn = |c: usize| 2 * c;
    let mut want = conv(spec.in_channels, stem) + bn(stem);
    let mut prev = stem;
    for (k, &c) in enc.iter().enumerate() {
        want += conv(prev, c) + bn(c);
        want += spec.stage_depths[k] * (2 * conv(c, c) + 2 * bn(c));
        prev = c;
    }
    for (k, &c) in dec.iter().enumerate() {
        let skip = match k {
            0..=2 => enc[2 - k],
            _ => stem,
        };
        want += conv(prev, c) + bn(c);
        // Block 0: widened conv1, projection linear + bn.
        want += conv(c + skip, c) + bn(c) + conv(c, c) + bn(c) + (c + skip) * c + bn(c);
        want += (spec.stage_depths[4 + k] - 1) * (2 * conv(c, c) + 2 * bn(c));
        prev = c;
    }
    let mlp = |cin: usize, cout: usize| cin * cout + cout + bn(cout);
    want += mlp(spec.in_channels, stem);
    want += mlp(stem, enc[3]);
    want += mlp(enc[3], dec[1]);
    want += mlp(dec[1], dec[3]);
    want += dec[3] * spec.num_classes + spec.num_classes;

    assert_eq!(net.param_count(), want);
}

#[test]
fn permuting_points_permutes_logits() {
    let net = build_network(&toy_spec(), Family::PointVoxel, 3).unwrap();
    let points = random_scene(240, 4, 3.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();
    let base = net.forward_eval(&points, &pipe).unwrap().logits;

    // Deterministic permutation.
    let n = points.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let positions: Vec<[f32; 3]> = perm.iter().map(|&i| points.positions[i]).collect();
    let mut feats = FeatureMatrix::zeros(n, 4);
    for (new, &old) in perm.iter().enumerate() {
        feats.row_mut(new).copy_from_slice(points.features.row(old));
    }
    let permuted = PointTensor::new(positions, feats, vec![0; n]);
    let pipe2 = ScenePipeline::build(&permuted.positions, &permuted.batch, 0.25).unwrap();
    let out = net.forward_eval(&permuted, &pipe2).unwrap().logits;

    for (new, &old) in perm.iter().enumerate() {
        for c in 0..4 {
            let a = out.get(new, c);
            let b = base.get(old, c);
            assert!(
                (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0),
                "row {old} ch {c}: {b} vs {a}"
            );
        }
    }
}

#[test]
fn voxel_only_equals_point_voxel_with_zeroed_branches() {
    let spec = toy_spec();
    let seed = 11;
    let mut spv = build_network(&spec, Family::PointVoxel, seed).unwrap();
    let vox = build_network(&spec, Family::VoxelOnly, seed).unwrap();

    // Same voxel-path parameters: copy by name from the voxel-only net, then
    // zero every point branch in the point-voxel net.
    for id in vox.params.ids() {
        let name = vox.params.name(id).to_string();
        let dst = spv.params.find(&name).expect("voxel path shares names");
        spv.params.get_mut(dst).copy_from_slice(vox.params.get(id));
    }
    if let Some(mlps) = &spv.topo.point_mlps {
        let ids: Vec<_> = mlps
            .iter()
            .flat_map(|p| {
                [
                    Some(p.linear.weight),
                    p.linear.bias,
                    Some(p.bn.gamma),
                    Some(p.bn.beta),
                ]
            })
            .flatten()
            .collect();
        for id in ids {
            spv.params.get_mut(id).fill(0.0);
        }
    }

    let points = random_scene(300, 12, 3.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();
    let a = spv.forward_eval(&points, &pipe).unwrap().logits;
    let b = vox.forward_eval(&points, &pipe).unwrap().logits;
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0));
    }
}

#[test]
fn coarse_cells_grow_by_the_stride_factor() {
    // Sixteen downsampled strides at 0.2 m cells make 3.2 m cells: on a
    // 51.2 m extent that is a 16x16 coarse grid, so sub-cell geometry
    // collapses to shared coordinates.
    let v = 0.2f64;
    let coarse = v * 16.0;
    assert!((coarse - 3.2).abs() < 1e-12);
    let extent = 51.2f64;
    assert_eq!((extent / coarse).round() as i64, 16);

    // Observable in a pipeline: two points 0.4 m apart share a stride-16
    // cell but not a stride-1 cell.
    let positions = vec![[10.0f32, 10.0, 0.1], [10.4, 10.0, 0.1]];
    let pipe = ScenePipeline::build(&positions, &[0, 0], 0.2).unwrap();
    assert_eq!(pipe.levels[0].coords.len(), 2);
    assert_eq!(pipe.levels[4].coords.len(), 1);
}

#[test]
fn analytic_macs_equal_the_instrumented_counter() {
    let spec = toy_spec();
    let net = build_network(&spec, Family::PointVoxel, 5).unwrap();
    let points = random_scene(400, 6, 3.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();

    let report = count_macs(&spec, Family::PointVoxel, &pipe.counts());
    profile::reset_macs();
    let _ = net.forward_eval(&points, &pipe).unwrap();
    let measured = profile::macs();
    assert_eq!(measured, report.total as u64, "analytic vs instrumented");

    // Voxel-only accounting likewise.
    let vox = build_network(&spec, Family::VoxelOnly, 5).unwrap();
    let report = count_macs(&spec, Family::VoxelOnly, &pipe.counts());
    profile::reset_macs();
    let _ = vox.forward_eval(&points, &pipe).unwrap();
    assert_eq!(profile::macs(), report.total as u64);
}

#[test]
fn estimate_from_single_scene_equals_count_macs() {
    let spec = toy_spec();
    let points = random_scene(300, 7, 3.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();
    let stats = estimate_kernel_map_sizes(&[pipe.counts()]).unwrap();
    let est = macs_breakdown(&spec, Family::PointVoxel, &stats);
    let cnt = count_macs(&spec, Family::PointVoxel, &pipe.counts());
    assert_eq!(est.total, cnt.total);
    assert_eq!(est.conv_macs, cnt.conv_macs);
}

fn toy_space() -> SearchSpace {
    SearchSpace {
        in_channels: 4,
        num_classes: 4,
        voxel_size: 0.25,
        stem_choices: vec![4, 8],
        stage_choices: vec![
            vec![8, 16],
            vec![8, 16],
            vec![16, 24],
            vec![16, 24],
            vec![16, 24],
            vec![8, 16],
            vec![8, 16],
            vec![8, 16],
        ],
        max_depth: 2,
    }
}

#[test]
fn parameter_count_is_monotone_in_widths_and_depths() {
    let base = toy_spec();
    let n0 = build_network(&base, Family::PointVoxel, 0)
        .unwrap()
        .param_count();
    let mut wider = base.clone();
    wider.stem_channels += 8;
    assert!(
        build_network(&wider, Family::PointVoxel, 0)
            .unwrap()
            .param_count()
            > n0
    );
    for k in 0..8 {
        let mut w = base.clone();
        w.stage_channels[k] += 8;
        assert!(
            build_network(&w, Family::PointVoxel, 0)
                .unwrap()
                .param_count()
                > n0
        );
        let mut d = base.clone();
        d.stage_depths[k] += 1;
        assert!(
            build_network(&d, Family::PointVoxel, 0)
                .unwrap()
                .param_count()
                > n0
        );
    }
}

#[test]
fn point_branch_overhead_stays_under_ten_percent_of_macs() {
    let spec = toy_spec();
    let points = random_scene(500, 30, 4.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();
    let report = count_macs(&spec, Family::PointVoxel, &pipe.counts());
    let branch_macs: f64 = report
        .items
        .iter()
        .filter(|(name, _)| name.starts_with("point"))
        .map(|(_, m)| m)
        .sum();
    let share = branch_macs / report.total;
    assert!(
        share < 0.10,
        "point branches cost {:.1}% of MACs",
        100.0 * share
    );
}

#[test]
fn sliced_supernet_equals_standalone_copy_bit_for_bit() {
    let space = toy_space();
    let sn = SuperNet::new(space.clone(), Family::PointVoxel, 21).unwrap();
    let points = random_scene(250, 22, 3.0);
    let pipe = ScenePipeline::build(&points.positions, &points.batch, 0.25).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..8 {
        let spec = sample_uniform(&space, &mut rng, (1, space.max_depth)).unwrap();
        let topo = sn.sliced_topology(&spec).unwrap();
        let sliced = forward_eval_parts(&topo, &sn.net.params, &points, &pipe)
            .unwrap()
            .logits;

        let mut standalone = build_network(&spec, Family::PointVoxel, 0).unwrap();
        copy_active_params(&topo, &sn.net.params, &mut standalone);
        let copied = standalone.forward_eval(&points, &pipe).unwrap().logits;

        assert_eq!(sliced.rows(), copied.rows());
        for (a, b) in sliced.data().iter().zip(copied.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "sliced vs standalone forward");
        }
    }
}
