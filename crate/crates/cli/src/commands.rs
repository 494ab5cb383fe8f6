//! Subcommand implementations.

use crate::util::{
    class_name, default_workers, load_arch, load_prepared, load_space, parse_family, CliError,
    CliResult, Printer,
};
use rayon::prelude::*;
use spvox_core::backbone::{
    argmax_rows, build_network, count_macs, forward_eval_parts, macs_breakdown, miou,
};
use spvox_core::conv::build_kernel_map_stride1;
use spvox_core::coords::{build_hash_map, voxelize_coords, voxelize_features};
use spvox_core::data::{write_dataset, SceneGenConfig};
use spvox_core::nas::{
    estimate_macs as nas_estimate_macs, evolutionary_search, load_checkpoint_into, prepare_scenes,
    save_checkpoint, supernet_fitness, train_fixed, train_supernet as nas_train_supernet,
    SearchConfig, SuperNet, SupernetSchedule,
};
use spvox_core::pipeline::{estimate_kernel_map_sizes, MacsStats};
use spvox_core::profile;
use std::path::Path;
use std::time::Instant;

pub fn gen_data(
    p: &Printer,
    config: Option<&Path>,
    out: &Path,
    count: usize,
    val_fraction: f64,
) -> CliResult {
    let cfg: SceneGenConfig = match config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        )?,
        None => SceneGenConfig::default(),
    };
    let meta = write_dataset(out, &cfg, count, val_fraction)?;
    p.line(format!(
        "wrote {count} scenes to {} ({} train, {} val)",
        out.display(),
        meta.train_ids.len(),
        meta.val_ids.len()
    ));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    p: &Printer,
    arch: &Path,
    data: &Path,
    family: &str,
    epochs: usize,
    lr: f32,
    momentum: f32,
    workers: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult {
    let spec = load_arch(arch)?;
    let family = parse_family(family)?;
    let workers = default_workers(workers);
    let ds = load_prepared(data, spec.voxel_size)?;
    if ds.train.is_empty() {
        return Err(CliError::Data("dataset has no training scenes".into()));
    }
    p.line(format!(
        "training {} scenes for {epochs} epochs ({workers} workers, seed {seed})",
        ds.train.len()
    ));
    let mut net = build_network(&spec, family, seed)?;
    let t0 = Instant::now();
    let report = train_fixed(&mut net, &ds.train, epochs, lr, momentum, workers, seed)?;
    for log in &report.epochs {
        p.line(format!(
            "epoch {}/{} loss {:.6}",
            log.epoch + 1,
            epochs,
            log.mean_loss
        ));
    }
    p.line(format!("trained in {:.1}s", t0.elapsed().as_secs_f64()));
    if !ds.val.is_empty() {
        let m = spvox_core::nas::evaluate_miou(&net, &ds.val, spec.num_classes, None)?;
        p.line(format!("validation mIoU {:.4}", m));
    }
    if let Some(path) = out {
        save_checkpoint(&net.params, path)?;
        p.line(format!("checkpoint written to {}", path.display()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_supernet(
    p: &Printer,
    space_path: &Path,
    data: &Path,
    out: &Path,
    family: &str,
    phase1_epochs: usize,
    phase1_lr: f32,
    phase2_epochs: usize,
    phase2_lr: f32,
    momentum: f32,
    workers: usize,
    seed: u64,
) -> CliResult {
    let space = load_space(space_path)?;
    let family = parse_family(family)?;
    let workers = default_workers(workers);
    let ds = load_prepared(data, space.voxel_size)?;
    if ds.train.is_empty() {
        return Err(CliError::Data("dataset has no training scenes".into()));
    }
    p.line(format!(
        "supernet over {} candidates, {} train scenes, {workers} workers, seed {seed}",
        space.size(),
        ds.train.len()
    ));
    let mut sn = SuperNet::new(space, family, seed)?;
    let schedule = SupernetSchedule {
        phase1_epochs,
        phase1_lr,
        phase2_epochs,
        phase2_lr,
        momentum,
    };
    let report = nas_train_supernet(&mut sn, &ds.train, &schedule, workers, seed)?;
    for log in &report.epochs {
        p.line(format!(
            "phase {} epoch {} loss {:.6}",
            log.phase,
            log.epoch + 1,
            log.mean_loss
        ));
    }
    save_checkpoint(&sn.net.params, out)?;
    p.line(format!("supernet checkpoint written to {}", out.display()));
    Ok(())
}

pub struct SearchArgs {
    pub ckpt: std::path::PathBuf,
    pub space: std::path::PathBuf,
    pub data: std::path::PathBuf,
    pub macs_limit: f64,
    pub out: std::path::PathBuf,
    pub log: Option<std::path::PathBuf>,
    pub family: String,
    pub population: usize,
    pub generations: usize,
    pub top_k: usize,
    pub mutation_prob: f64,
    pub seed: u64,
    pub calib_scenes: usize,
    pub fitness_scenes: usize,
}

pub fn search(p: &Printer, args: SearchArgs) -> CliResult {
    let space = load_space(&args.space)?;
    let family = parse_family(&args.family)?;
    let ds = load_prepared(&args.data, space.voxel_size)?;
    let mut sn = SuperNet::new(space.clone(), family, args.seed)?;
    load_checkpoint_into(&mut sn.net.params, &args.ckpt)?;

    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(CliError::Data(
            "search needs both train (calibration) and val (fitness) scenes".into(),
        ));
    }
    let calib = &ds.train[..args.calib_scenes.min(ds.train.len())];
    let val = &ds.val[..args.fitness_scenes.min(ds.val.len())];

    // MACs model from calibration statistics.
    let counts: Vec<_> = calib.iter().map(|s| s.pipe.counts()).collect();
    let stats = estimate_kernel_map_sizes(&counts)?;

    let config = SearchConfig {
        population: args.population,
        generations: args.generations,
        top_k: args.top_k,
        mutation_prob: args.mutation_prob,
        macs_limit: args.macs_limit,
        seed: args.seed,
        ..Default::default()
    };
    p.line(format!(
        "searching {} candidates under {:.3e} MACs (population {}, {} generations)",
        space.size(),
        args.macs_limit,
        config.population,
        config.generations
    ));

    let sn_ref = &sn;
    let mut fitness = |specs: &[spvox_core::ArchSpec]| -> Vec<f64> {
        specs
            .par_iter()
            .map(|spec| {
                supernet_fitness(sn_ref, spec, calib, val)
                    .expect("fitness evaluation on a validated candidate")
            })
            .collect()
    };
    let constraint = |spec: &spvox_core::ArchSpec| nas_estimate_macs(spec, family, &stats);
    let result = evolutionary_search(&config, &space, &mut fitness, &constraint)?;

    let mut log_lines = String::new();
    for rec in &result.history {
        let line = serde_json::to_string(&serde_json::json!({
            "generation": rec.generation,
            "best_macs": rec.best_macs,
            "best_fitness": rec.best_fitness,
            "mean_fitness": rec.mean_fitness,
            "best_spec": serde_json::to_value(&rec.best_spec).expect("spec serializes"),
        }))
        .expect("record serializes");
        p.line(&line);
        log_lines.push_str(&line);
        log_lines.push('\n');
    }
    if let Some(log_path) = &args.log {
        std::fs::write(log_path, log_lines)
            .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    }
    std::fs::write(&args.out, result.best.to_canonical_json())
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    p.line(format!(
        "best candidate ({:.4} fitness, {:.3e} MACs) written to {}",
        result.best_fitness,
        constraint(&result.best),
        args.out.display()
    ));
    Ok(())
}

pub fn eval(
    p: &Printer,
    arch: &Path,
    weights: &Path,
    data: &Path,
    family: &str,
    train_split: bool,
) -> CliResult {
    let spec = load_arch(arch)?;
    let family = parse_family(family)?;
    let ds = load_prepared(data, spec.voxel_size)?;
    let scenes = if train_split { &ds.train } else { &ds.val };
    if scenes.is_empty() {
        return Err(CliError::Data("no scenes in the requested split".into()));
    }
    let mut net = build_network(&spec, family, 0)?;
    load_checkpoint_into(&mut net.params, weights)?;

    let per_scene: Vec<(Vec<u32>, Vec<u32>)> = scenes
        .par_iter()
        .map(|scene| {
            let out = forward_eval_parts(&net.topo, &net.params, &scene.points, &scene.pipe)?;
            Ok((argmax_rows(&out.logits), scene.labels.clone()))
        })
        .collect::<Result<_, spvox_core::backbone::BackboneError>>()?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (pr, la) in per_scene {
        preds.extend(pr);
        labels.extend(la);
    }
    let report = miou(&preds, &labels, spec.num_classes, None);
    p.line(format!("{:<12} {:>8}", "class", "IoU"));
    for (i, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => p.line(format!("{:<12} {:>8.4}", class_name(i), v)),
            None => p.line(format!("{:<12} {:>8}", class_name(i), "absent")),
        }
    }
    p.line(format!("{:<12} {:>8.4}", "mIoU", report.mean));
    Ok(())
}

pub fn benchmark(p: &Printer, arch: &Path, data: &Path, family: &str, scenes: usize) -> CliResult {
    let spec = load_arch(arch)?;
    let family = parse_family(family)?;
    let ds = load_prepared(data, spec.voxel_size)?;
    let pool: Vec<_> = ds
        .val
        .iter()
        .chain(ds.train.iter())
        .take(scenes.max(1))
        .collect();
    if pool.is_empty() {
        return Err(CliError::Data("no scenes to benchmark".into()));
    }
    let net = build_network(&spec, family, 0)?;
    let v = spec.voxel_size as f32;

    let mut t_vox = 0.0f64;
    let mut t_hash = 0.0f64;
    let mut t_kmap = 0.0f64;
    let mut t_conv = 0.0f64;
    let mut t_devox = 0.0f64;
    let mut t_forward = 0.0f64;
    let mut total_macs = 0u64;
    let mut total_points = 0usize;

    for scene in &pool {
        let points = &scene.points;
        total_points += points.len();

        let t0 = Instant::now();
        let (coords, vmap) = voxelize_coords(points, v)?;
        let vox_feats = voxelize_features(&points.features, &vmap)?;
        t_vox += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let hash = build_hash_map(&coords)?;
        t_hash += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let kmap = build_kernel_map_stride1(&coords, &hash, 1);
        t_kmap += t0.elapsed().as_secs_f64();

        // One representative convolution: the stem layer on real features.
        let t0 = Instant::now();
        let conv_out = net
            .topo
            .stem
            .conv
            .forward(&net.params, &vox_feats, &kmap)
            .map_err(CliError::from_display)?;
        t_conv += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let _ = spvox_core::coords::devoxelize_rows(
            &points.positions,
            &points.batch,
            &conv_out,
            v,
            1,
            &hash,
        );
        t_devox += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        profile::reset_macs();
        let _ = net.forward_eval(&scene.points, &scene.pipe)?;
        total_macs += profile::macs();
        t_forward += t0.elapsed().as_secs_f64();
    }

    let n = pool.len() as f64;
    p.line(format!(
        "benchmark over {} scenes ({} points total)",
        pool.len(),
        total_points
    ));
    p.line(format!("{:<22} {:>12}", "operation", "ms/scene"));
    for (name, t) in [
        ("voxelize", t_vox),
        ("hash build", t_hash),
        ("kernel map (stride 1)", t_kmap),
        ("stem convolution", t_conv),
        ("devoxelize", t_devox),
        ("full forward", t_forward),
    ] {
        p.line(format!("{:<22} {:>12.3}", name, 1e3 * t / n));
    }
    let report = count_macs(&spec, family, &pool[0].pipe.counts());
    p.line(format!(
        "forward MACs/scene (measured) {:.3e}",
        total_macs as f64 / n
    ));
    p.line(format!(
        "forward MACs (first scene, analytic) {:.3e} ({:.3e} conv, {:.3e} point)",
        report.total, report.conv_macs, report.point_macs
    ));
    Ok(())
}

pub fn estimate_macs(p: &Printer, arch: &Path, calib: &Path, family: &str) -> CliResult {
    let spec = load_arch(arch)?;
    let family = parse_family(family)?;
    let raw = spvox_core::data::load_dataset(calib)?;
    let scenes = prepare_scenes(&raw.train, spec.voxel_size as f32)?;
    if scenes.is_empty() {
        return Err(CliError::Data("calibration set is empty".into()));
    }
    let counts: Vec<_> = scenes.iter().map(|s| s.pipe.counts()).collect();
    let stats: MacsStats = estimate_kernel_map_sizes(&counts)?;
    let report = macs_breakdown(&spec, family, &stats);
    p.line(format!("{:<24} {:>16}", "layer", "MACs"));
    for (name, macs) in &report.items {
        p.line(format!("{:<24} {:>16.1}", name, macs));
    }
    p.line(format!("{:<24} {:>16.1}", "total conv", report.conv_macs));
    p.line(format!("{:<24} {:>16.1}", "total point", report.point_macs));
    p.line(format!("{:<24} {:>16.1}", "total", report.total));
    Ok(())
}
