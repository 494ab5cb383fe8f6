//! Architecture search: a weight-sharing supernet trained with uniform
//! candidate sampling and progressive depth shrinking, searched by a
//! MACs-constrained evolutionary algorithm, with subnet extraction and
//! finetuning.

mod checkpoint;
mod eval;
mod search;
mod supernet;
mod train;

pub use checkpoint::{load_checkpoint_into, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{
    evaluate_miou, extract_and_finetune, recalibrate_bn, supernet_fitness, FinetuneConfig,
};
pub use search::{
    evolutionary_search, random_search, GenerationRecord, SearchConfig, SearchResult,
};
pub use supernet::{estimate_macs, slice_weights, SuperNet};
pub use train::{
    prepare_scenes, train_fixed, train_supernet, EpochLog, PreparedScene, SupernetSchedule,
    TrainReport,
};

use crate::backbone::ArchSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("empty depth range [{lo}, {hi}]")]
    EmptyDepthRange { lo: usize, hi: usize },
    #[error("architecture outside the search space: {0}")]
    OutsideSpace(String),
    #[error("non-finite loss while training candidate {spec}")]
    NonFiniteLoss { spec: String },
    #[error("non-finite fitness for candidate {0}")]
    NonFiniteFitness(String),
    #[error(
        "no feasible candidate found within {attempts} resampling attempts (constraint {limit})"
    )]
    Infeasible { attempts: usize, limit: f64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Coord(#[from] crate::coords::CoordError),
}

/// The architecture design space: channel choice lists per width slot and a
/// shared per-stage depth range `[1, max_depth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub in_channels: usize,
    pub num_classes: usize,
    pub voxel_size: f64,
    pub stem_choices: Vec<usize>,
    /// One choice list per stage; the stage count is this list's length.
    pub stage_choices: Vec<Vec<usize>>,
    /// Depth choices run 1..=max_depth for every stage.
    pub max_depth: usize,
}

impl SearchSpace {
    pub fn num_stages(&self) -> usize {
        self.stage_choices.len()
    }

    /// Largest candidate: maximal width everywhere, maximal depth.
    pub fn max_spec(&self) -> ArchSpec {
        ArchSpec {
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            voxel_size: self.voxel_size,
            stem_channels: *self.stem_choices.iter().max().expect("nonempty choices"),
            stage_channels: self
                .stage_choices
                .iter()
                .map(|c| *c.iter().max().expect("nonempty choices"))
                .collect(),
            stage_depths: vec![self.max_depth; self.num_stages()],
        }
    }

    pub fn contains(&self, spec: &ArchSpec) -> bool {
        spec.in_channels == self.in_channels
            && spec.num_classes == self.num_classes
            && spec.voxel_size == self.voxel_size
            && self.stem_choices.contains(&spec.stem_channels)
            && spec.stage_channels.len() == self.num_stages()
            && spec.stage_depths.len() == self.num_stages()
            && spec
                .stage_channels
                .iter()
                .zip(&self.stage_choices)
                .all(|(c, choices)| choices.contains(c))
            && spec
                .stage_depths
                .iter()
                .all(|&d| (1..=self.max_depth).contains(&d))
    }

    /// Number of candidates in the space.
    pub fn size(&self) -> u128 {
        let widths: u128 = self
            .stage_choices
            .iter()
            .map(|c| c.len() as u128)
            .product::<u128>()
            * self.stem_choices.len() as u128;
        widths * (self.max_depth as u128).pow(self.num_stages() as u32)
    }

    pub fn validate(&self) -> Result<(), NasError> {
        if self.stem_choices.is_empty()
            || self.stage_choices.iter().any(Vec::is_empty)
            || self.max_depth == 0
        {
            return Err(NasError::OutsideSpace(
                "search space has an empty choice list".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a candidate uniformly: every channel slot i.i.d. over its choice
/// list, every stage depth i.i.d. over `depth_range` (inclusive).
pub fn sample_uniform(
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
    depth_range: (usize, usize),
) -> Result<ArchSpec, NasError> {
    let (lo, hi) = depth_range;
    if lo < 1 || hi > space.max_depth || lo > hi {
        return Err(NasError::EmptyDepthRange { lo, hi });
    }
    let stem_channels = space.stem_choices[rng.random_range(0..space.stem_choices.len())];
    let stage_channels = space
        .stage_choices
        .iter()
        .map(|c| c[rng.random_range(0..c.len())])
        .collect();
    let stage_depths = (0..space.num_stages())
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    Ok(ArchSpec {
        in_channels: space.in_channels,
        num_classes: space.num_classes,
        voxel_size: space.voxel_size,
        stem_channels,
        stage_channels,
        stage_depths,
    })
}

/// Progressive depth shrinking: the elastic-depth epochs split into
/// `max_depth` equal contiguous segments; during segment `k` (1-based) the
/// allowed depths are `[max_depth - k + 1, max_depth]`. Boundary epochs fall
/// into the later segment.
pub fn depth_range_for_epoch(
    epoch: usize,
    total_epochs: usize,
    max_depth: usize,
) -> (usize, usize) {
    assert!(total_epochs > 0 && max_depth > 0);
    assert!(epoch < total_epochs, "epoch index within the schedule");
    let segment = epoch * max_depth / total_epochs + 1;
    (max_depth - segment + 1, max_depth)
}
