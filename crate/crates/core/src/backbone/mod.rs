//! Backbone construction: a point-voxel U-shaped segmentation network (four
//! encoder and four decoder stages wrapped by point branches) and its
//! voxel-only twin, both parameterized by an [`ArchSpec`].

mod macs;
mod metrics;
mod net;

pub use macs::{count_macs, macs_breakdown, macs_totals, MacsReport};
pub use metrics::{argmax_rows, miou, IouReport};
pub use net::{
    backward_parts, bn_layers_of, build_network, collect_bn_stats, copy_active_params,
    forward_eval_parts, forward_segmentation, forward_train_parts, ConvUnit, DecStage, EncStage,
    EvalOutput, NetTape, NetTopology, NetworkInstance,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of elastic stages: four encoder followed by four decoder.
pub const STAGES: usize = 8;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid architecture: {}", violations.join("; "))]
    InvalidSpec { violations: Vec<String> },
    #[error("empty scene")]
    EmptyScene,
    #[error(transparent)]
    Conv(#[from] crate::conv::ConvError),
    #[error(transparent)]
    Coord(#[from] crate::coords::CoordError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Which family a network belongs to: the full point-voxel network or the
/// baseline with every point branch removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PointVoxel,
    VoxelOnly,
}

/// One point in the architecture space: a stem width, one width and one depth
/// per stage, plus the fixed task geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Meters per lattice unit at stride 1. Stored in 64-bit so the canonical
    /// JSON form round-trips exactly.
    pub voxel_size: f64,
    pub stem_channels: usize,
    /// Widths of the four encoder stages followed by the four decoder stages.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage, same order.
    pub stage_depths: Vec<usize>,
}

impl ArchSpec {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn encoder_channels(&self) -> &[usize] {
        &self.stage_channels[..4]
    }

    pub fn decoder_channels(&self) -> &[usize] {
        &self.stage_channels[4..]
    }

    /// Structural validation; returns every violated constraint.
    pub fn validate(&self) -> Result<(), BackboneError> {
        let mut violations = Vec::new();
        if self.stage_channels.len() != STAGES {
            violations.push(format!(
                "expected {STAGES} stage widths, got {}",
                self.stage_channels.len()
            ));
        }
        if self.stage_depths.len() != STAGES {
            violations.push(format!(
                "expected {STAGES} stage depths, got {}",
                self.stage_depths.len()
            ));
        }
        if self.in_channels == 0 {
            violations.push("in_channels must be positive".into());
        }
        if self.num_classes == 0 {
            violations.push("num_classes must be positive".into());
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            violations.push(format!(
                "voxel_size must be positive, got {}",
                self.voxel_size
            ));
        }
        if self.stem_channels == 0 {
            violations.push("stem width must be positive".into());
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 {
                violations.push(format!("stage {i} width must be positive"));
            }
        }
        for (i, &d) in self.stage_depths.iter().enumerate() {
            if d == 0 {
                violations.push(format!("stage {i} depth must be at least 1"));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(BackboneError::InvalidSpec { violations })
        }
    }

    /// Canonical JSON: object keys sorted, no insignificant whitespace.
    /// Stable across platforms; used for files, logs, and cache keys.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("spec serializes");
        serde_json::to_string(&value).expect("json value prints")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
