//! The training engine: deterministic multi-worker steps with gradient
//! averaging, shared by supernet training (one sampled candidate per worker
//! per step) and fixed-architecture training.

use super::{depth_range_for_epoch, sample_uniform, NasError, SuperNet};
use crate::backbone::{
    backward_parts, bn_layers_of, collect_bn_stats, forward_train_parts, NetTopology,
    NetworkInstance,
};
use crate::coords::PointTensor;
use crate::data::Scene;
use crate::nn::{cosine_lr, cross_entropy, BatchNormLayer, BnStats, SgdState, TensorStore};
use crate::pipeline::ScenePipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// A scene with its point tensor and coordinate pipeline built once.
pub struct PreparedScene {
    pub points: PointTensor,
    pub labels: Vec<u32>,
    pub pipe: ScenePipeline,
    pub id: u64,
}

/// Builds point tensors and coordinate pipelines for a scene list.
pub fn prepare_scenes(scenes: &[Scene], voxel_size: f32) -> Result<Vec<PreparedScene>, NasError> {
    scenes
        .par_iter()
        .map(|s| {
            let points = s.to_point_tensor();
            let pipe = ScenePipeline::build(&points.positions, &points.batch, voxel_size)?;
            Ok(PreparedScene {
                points,
                labels: s.labels.clone(),
                pipe,
                id: s.id,
            })
        })
        .collect()
}

/// Two-phase supernet schedule: phase 1 samples channels only (depth pinned
/// maximal), phase 2 adds elastic depth with progressive shrinking.
#[derive(Debug, Clone)]
pub struct SupernetSchedule {
    pub phase1_epochs: usize,
    pub phase1_lr: f32,
    pub phase2_epochs: usize,
    pub phase2_lr: f32,
    pub momentum: f32,
}

impl Default for SupernetSchedule {
    fn default() -> Self {
        // Starting learning rates follow the published training recipe
        // (0.24 then 0.096, cosine decay); epoch counts are configuration.
        Self {
            phase1_epochs: 15,
            phase1_lr: 0.24,
            phase2_epochs: 15,
            phase2_lr: 0.096,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub phase: usize,
    pub epoch: usize,
    pub mean_loss: f32,
    /// Depth vector of every candidate sampled during this epoch.
    pub sampled_depths: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn phase_losses(&self, phase: usize) -> Vec<f32> {
        self.epochs
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.mean_loss)
            .collect()
    }
}

/// Per-epoch candidate policy.
enum Policy<'a> {
    Fixed,
    Uniform {
        space: &'a super::SearchSpace,
        depth_range: (usize, usize),
    },
}

struct WorkerOut {
    loss: f32,
    bn: Vec<(BatchNormLayer, BnStats)>,
    spec_json: Option<String>,
    depths: Option<Vec<usize>>,
}

/// One phase of epochs over `scenes` with cosine decay from `base_lr`.
#[allow(clippy::too_many_arguments)]
fn run_phase<'a>(
    net: &mut NetworkInstance,
    policy_for_epoch: &dyn Fn(usize) -> Policy<'a>,
    scenes: &[PreparedScene],
    epochs: usize,
    base_lr: f32,
    momentum: f32,
    workers: usize,
    seed: u64,
    phase_tag: usize,
    report: &mut TrainReport,
) -> Result<(), NasError> {
    assert!(workers >= 1);
    assert!(!scenes.is_empty(), "training needs at least one scene");
    let steps_per_epoch = scenes.len().div_ceil(workers);
    let total_steps = epochs * steps_per_epoch;
    let mut sgd = SgdState::new(&net.params, base_lr.max(f32::MIN_POSITIVE), momentum);

    let mut worker_rngs: Vec<ChaCha8Rng> = (0..workers)
        .map(|w| {
            ChaCha8Rng::seed_from_u64(crate::derive_seed(
                seed,
                &format!("phase{phase_tag}.worker{w}"),
            ))
        })
        .collect();
    let mut worker_grads: Vec<TensorStore> =
        (0..workers).map(|_| net.params.zeros_like()).collect();

    let mut global_step = 0usize;
    for epoch in 0..epochs {
        let policy = policy_for_epoch(epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(
            seed,
            &format!("phase{phase_tag}.shuffle{epoch}"),
        ));
        shuffle(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0f32;
        let mut loss_count = 0usize;
        let mut sampled_depths = Vec::new();

        for step in 0..steps_per_epoch {
            let lr = cosine_lr(base_lr, global_step, total_steps);
            global_step += 1;

            // Assign one scene per worker; the tail step may run fewer.
            let assignments: Vec<Option<usize>> = (0..workers)
                .map(|w| order.get(step * workers + w).copied())
                .collect();

            // Sample candidates sequentially from per-worker streams so the
            // trajectory is reproducible at a fixed worker count.
            type Job = (usize, NetTopology, Option<String>, Option<Vec<usize>>);
            let mut jobs: Vec<Option<Job>> = Vec::with_capacity(workers);
            for (w, assignment) in assignments.iter().enumerate() {
                let Some(scene_idx) = assignment else {
                    jobs.push(None);
                    continue;
                };
                match &policy {
                    Policy::Fixed => jobs.push(Some((*scene_idx, net.topo.clone(), None, None))),
                    Policy::Uniform { space, depth_range } => {
                        let spec = sample_uniform(space, &mut worker_rngs[w], *depth_range)?;
                        let mut topo = net.topo.clone();
                        topo.apply_slice(&spec)?;
                        let depths = spec.stage_depths.clone();
                        jobs.push(Some((
                            *scene_idx,
                            topo,
                            Some(spec.to_canonical_json()),
                            Some(depths),
                        )));
                    }
                }
            }
            // Run workers concurrently over the shared parameter store.
            let params = &net.params;
            let results: Vec<Option<Result<WorkerOut, NasError>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = jobs
                    .iter()
                    .zip(worker_grads.iter_mut())
                    .map(|(job, grads)| {
                        job.as_ref().map(|(scene_idx, topo, spec_json, depths)| {
                            let scene = &scenes[*scene_idx];
                            scope.spawn(move || {
                                grads.fill_zero();
                                let (logits, tape) =
                                    forward_train_parts(topo, params, &scene.points, &scene.pipe)?;
                                let (loss, grad_logits) =
                                    cross_entropy(&logits, &scene.labels, None)?;
                                if !loss.is_finite() {
                                    return Err(NasError::NonFiniteLoss {
                                        spec: spec_json
                                            .clone()
                                            .unwrap_or_else(|| "fixed".to_string()),
                                    });
                                }
                                backward_parts(
                                    topo,
                                    params,
                                    &scene.points,
                                    &scene.pipe,
                                    &tape,
                                    &grad_logits,
                                    grads,
                                );
                                let bn = bn_layers_of(topo)
                                    .into_iter()
                                    .zip(collect_bn_stats(&tape))
                                    .collect();
                                Ok(WorkerOut {
                                    loss,
                                    bn,
                                    spec_json: spec_json.clone(),
                                    depths: depths.clone(),
                                })
                            })
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.map(|h| h.join().expect("worker thread")))
                    .collect()
            });

            // Reduce in worker order: average gradients, fold BN statistics.
            // Assignments fill from worker 0 upward, so the workers that ran
            // this step are exactly the leading `active` ones.
            let mut active = 0usize;
            let mut outs: Vec<WorkerOut> = Vec::with_capacity(workers);
            for r in results.into_iter().flatten() {
                outs.push(r?);
                active += 1;
            }
            if active == 0 {
                continue;
            }
            let mut avg = std::mem::replace(&mut worker_grads[0], TensorStore::new());
            for other in worker_grads.iter().take(active).skip(1) {
                avg.add_from(other);
            }
            avg.scale(1.0 / active as f32);
            sgd.learning_rate = lr;
            let step_result = sgd.step(&mut net.params, &avg);
            worker_grads[0] = avg;
            if let Err(e) = step_result {
                let spec = outs
                    .iter()
                    .find_map(|o| o.spec_json.clone())
                    .unwrap_or_else(|| "fixed".to_string());
                return Err(match e {
                    crate::nn::NnError::NonFiniteGradient { .. } => {
                        NasError::NonFiniteLoss { spec }
                    }
                    other => NasError::Nn(other),
                });
            }
            for out in &outs {
                for (layer, stats) in &out.bn {
                    layer.update_running(&mut net.params, stats);
                }
                loss_sum += out.loss;
                loss_count += 1;
                if let Some(d) = &out.depths {
                    sampled_depths.push(d.clone());
                }
            }
        }

        report.epochs.push(EpochLog {
            phase: phase_tag,
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f32,
            sampled_depths,
        });
    }
    Ok(())
}

/// Fisher-Yates with the provided stream.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Two-phase supernet training: per step, every worker samples a candidate,
/// computes gradients on its own scene, and the averaged gradient updates
/// the shared weights once.
pub fn train_supernet(
    sn: &mut SuperNet,
    train: &[PreparedScene],
    schedule: &SupernetSchedule,
    workers: usize,
    seed: u64,
) -> Result<TrainReport, NasError> {
    let mut report = TrainReport::default();
    let space = sn.space.clone();
    let m = space.max_depth;
    // Phase 1: fine-grained channels only; depth stays maximal.
    run_phase(
        &mut sn.net,
        &|_| Policy::Uniform {
            space: &space,
            depth_range: (m, m),
        },
        train,
        schedule.phase1_epochs,
        schedule.phase1_lr,
        schedule.momentum,
        workers,
        seed,
        1,
        &mut report,
    )?;
    // Phase 2: elastic depth with progressive shrinking.
    let phase2_epochs = schedule.phase2_epochs;
    run_phase(
        &mut sn.net,
        &|epoch| Policy::Uniform {
            space: &space,
            depth_range: depth_range_for_epoch(epoch, phase2_epochs, m),
        },
        train,
        schedule.phase2_epochs,
        schedule.phase2_lr,
        schedule.momentum,
        workers,
        seed,
        2,
        &mut report,
    )?;
    Ok(report)
}

/// Plain fixed-architecture training with the same worker machinery.
pub fn train_fixed(
    net: &mut NetworkInstance,
    train: &[PreparedScene],
    epochs: usize,
    base_lr: f32,
    momentum: f32,
    workers: usize,
    seed: u64,
) -> Result<TrainReport, NasError> {
    let mut report = TrainReport::default();
    run_phase(
        net,
        &|_| Policy::Fixed,
        train,
        epochs,
        base_lr,
        momentum,
        workers,
        seed,
        1,
        &mut report,
    )?;
    Ok(report)
}
