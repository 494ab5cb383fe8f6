//! Candidate evaluation: BN recalibration, validation mIoU, and subnet
//! extraction with finetuning.

use super::train::{train_fixed, PreparedScene};
use super::{NasError, SuperNet};
use crate::backbone::{
    argmax_rows, build_network, collect_bn_stats, copy_active_params, forward_eval_parts, miou,
    ArchSpec, NetworkInstance,
};
use crate::nn::BnStats;
use rayon::prelude::*;

/// Replaces BN running statistics with the average batch statistics over one
/// calibration pass (training-mode forwards, no parameter updates).
pub fn recalibrate_bn(net: &mut NetworkInstance, calib: &[PreparedScene]) -> Result<(), NasError> {
    assert!(!calib.is_empty(), "calibration needs at least one scene");
    let mut acc: Option<Vec<BnStats>> = None;
    for scene in calib {
        let (_, tape) = net.forward_train(&scene.points, &scene.pipe)?;
        let stats = collect_bn_stats(&tape);
        match &mut acc {
            None => acc = Some(stats),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(&stats) {
                    for (x, y) in a.mean.iter_mut().zip(&s.mean) {
                        *x += *y;
                    }
                    for (x, y) in a.var.iter_mut().zip(&s.var) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let mut stats = acc.expect("nonempty calibration");
    let inv = 1.0 / calib.len() as f32;
    for s in &mut stats {
        for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
            *v *= inv;
        }
    }
    net.set_bn_stats(&stats);
    Ok(())
}

/// Mean IoU over scenes: predictions and labels accumulate into one global
/// confusion before the per-class division.
pub fn evaluate_miou(
    net: &NetworkInstance,
    scenes: &[PreparedScene],
    class_count: usize,
    ignore_index: Option<u32>,
) -> Result<f64, NasError> {
    let per_scene: Vec<(Vec<u32>, Vec<u32>)> = scenes
        .par_iter()
        .map(|scene| {
            let out = forward_eval_parts(&net.topo, &net.params, &scene.points, &scene.pipe)?;
            Ok((argmax_rows(&out.logits), scene.labels.clone()))
        })
        .collect::<Result<_, NasError>>()?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in per_scene {
        preds.extend(p);
        labels.extend(l);
    }
    Ok(miou(&preds, &labels, class_count, ignore_index).mean)
}

/// Fitness of one candidate: slice the supernet (over a cloned store),
/// recalibrate BN on the calibration split, and score validation mIoU.
pub fn supernet_fitness(
    sn: &SuperNet,
    spec: &ArchSpec,
    calib: &[PreparedScene],
    val: &[PreparedScene],
) -> Result<f64, NasError> {
    let topo = sn.sliced_topology(spec)?;
    let mut net = NetworkInstance {
        topo,
        params: sn.net.params.clone(),
    };
    recalibrate_bn(&mut net, calib)?;
    evaluate_miou(&net, val, spec.num_classes, None)
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub workers: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        // Ten epochs at 0.032 with cosine decay is the published finetuning
        // recipe for extracted candidates.
        Self {
            epochs: 10,
            base_lr: 0.032,
            momentum: 0.9,
            workers: 1,
            seed: 0,
        }
    }
}

/// Copies the sliced weights out of the supernet into a standalone network,
/// recalibrates its BN statistics, and (optionally) finetunes.
pub fn extract_and_finetune(
    sn: &SuperNet,
    spec: &ArchSpec,
    train: &[PreparedScene],
    calib: &[PreparedScene],
    config: &FinetuneConfig,
) -> Result<NetworkInstance, NasError> {
    let topo = sn.sliced_topology(spec)?;
    let mut net = build_network(
        spec,
        sn.net.topo.family,
        crate::derive_seed(config.seed, "extract"),
    )?;
    copy_active_params(&topo, &sn.net.params, &mut net);
    recalibrate_bn(&mut net, calib)?;
    if config.epochs > 0 {
        train_fixed(
            &mut net,
            train,
            config.epochs,
            config.base_lr,
            config.momentum,
            config.workers,
            config.seed,
        )?;
    }
    Ok(net)
}
