//! MACs accounting: analytic multiply-accumulate counts from architecture
//! plus kernel-map statistics.
//!
//! A sparse convolution costs `entries * in_ch * out_ch`; a per-point or
//! per-voxel linear layer costs `rows * in_ch * out_ch`. Normalization,
//! activation, and interpolation are excluded. On single-scene statistics
//! every figure is an exact integer.

use super::{ArchSpec, Family};
use crate::pipeline::MacsStats;

/// One costed layer emitted by the visitor.
pub struct LayerCost {
    pub stage: LayerSite,
    pub macs: f64,
    /// True for 3x3x3 convolutions and 1x1 skip projections, false for
    /// per-point layers.
    pub conv: bool,
}

pub enum LayerSite {
    Stem,
    EncDown(usize),
    EncBlockConv(usize, usize, u8),
    DecUp(usize),
    DecBlockConv(usize, usize, u8),
    DecBlockSkip(usize, usize),
    PointBranch(usize),
    Classifier,
}

impl LayerSite {
    fn name(&self) -> String {
        match self {
            LayerSite::Stem => "stem.conv".into(),
            LayerSite::EncDown(k) => format!("enc{k}.down"),
            LayerSite::EncBlockConv(k, i, which) => format!("enc{k}.block{i}.conv{which}"),
            LayerSite::DecUp(k) => format!("dec{k}.up"),
            LayerSite::DecBlockConv(k, i, which) => format!("dec{k}.block{i}.conv{which}"),
            LayerSite::DecBlockSkip(k, i) => format!("dec{k}.block{i}.skip"),
            LayerSite::PointBranch(i) => format!("point{i}"),
            LayerSite::Classifier => "classifier".into(),
        }
    }
}

/// Walks every costed layer of the family's topology in forward order.
pub fn visit_macs(
    spec: &ArchSpec,
    family: Family,
    stats: &MacsStats,
    visit: &mut dyn FnMut(LayerCost),
) {
    let enc = spec.encoder_channels();
    let dec = spec.decoder_channels();
    let stem = spec.stem_channels as f64;

    visit(LayerCost {
        stage: LayerSite::Stem,
        macs: stats.sub_entries[0] * spec.in_channels as f64 * stem,
        conv: true,
    });

    for k in 0..4 {
        let cin = if k == 0 { stem } else { enc[k - 1] as f64 };
        let c = enc[k] as f64;
        visit(LayerCost {
            stage: LayerSite::EncDown(k),
            macs: stats.down_entries[k] * cin * c,
            conv: true,
        });
        let e = stats.sub_entries[k + 1];
        for i in 0..spec.stage_depths[k] {
            visit(LayerCost {
                stage: LayerSite::EncBlockConv(k, i, 1),
                macs: e * c * c,
                conv: true,
            });
            visit(LayerCost {
                stage: LayerSite::EncBlockConv(k, i, 2),
                macs: e * c * c,
                conv: true,
            });
        }
    }

    for k in 0..4 {
        let cin = if k == 0 {
            enc[3] as f64
        } else {
            dec[k - 1] as f64
        };
        let c = dec[k] as f64;
        let skip = match k {
            0..=2 => enc[2 - k] as f64,
            _ => stem,
        };
        let level = 3 - k;
        visit(LayerCost {
            stage: LayerSite::DecUp(k),
            macs: stats.up_entries[level] * cin * c,
            conv: true,
        });
        let e = stats.sub_entries[level];
        for i in 0..spec.stage_depths[4 + k] {
            let c1_in = if i == 0 { c + skip } else { c };
            visit(LayerCost {
                stage: LayerSite::DecBlockConv(k, i, 1),
                macs: e * c1_in * c,
                conv: true,
            });
            visit(LayerCost {
                stage: LayerSite::DecBlockConv(k, i, 2),
                macs: e * c * c,
                conv: true,
            });
            if i == 0 {
                visit(LayerCost {
                    stage: LayerSite::DecBlockSkip(k, i),
                    macs: stats.rows[level] * c1_in * c,
                    conv: true,
                });
            }
        }
    }

    if family == Family::PointVoxel {
        let dims = [
            (spec.in_channels as f64, stem),
            (stem, enc[3] as f64),
            (enc[3] as f64, dec[1] as f64),
            (dec[1] as f64, dec[3] as f64),
        ];
        for (i, (cin, cout)) in dims.iter().enumerate() {
            visit(LayerCost {
                stage: LayerSite::PointBranch(i),
                macs: stats.points * cin * cout,
                conv: false,
            });
        }
    }
    visit(LayerCost {
        stage: LayerSite::Classifier,
        macs: stats.points * dec[3] as f64 * spec.num_classes as f64,
        conv: false,
    });
}

#[derive(Debug, Clone)]
pub struct MacsReport {
    /// Per-layer breakdown in forward order: (layer name, MACs).
    pub items: Vec<(String, f64)>,
    /// All 3x3x3 convolutions plus the 1x1 skip projections.
    pub conv_macs: f64,
    /// Point branches and the per-point classifier.
    pub point_macs: f64,
    pub total: f64,
}

/// Full per-layer report of the MACs model.
pub fn macs_breakdown(spec: &ArchSpec, family: Family, stats: &MacsStats) -> MacsReport {
    let mut r = MacsReport {
        items: Vec::new(),
        conv_macs: 0.0,
        point_macs: 0.0,
        total: 0.0,
    };
    visit_macs(spec, family, stats, &mut |cost| {
        if cost.conv {
            r.conv_macs += cost.macs;
        } else {
            r.point_macs += cost.macs;
        }
        r.total += cost.macs;
        r.items.push((cost.stage.name(), cost.macs));
    });
    r
}

/// Totals only; no allocation, suitable for exhaustive sweeps.
pub fn macs_totals(spec: &ArchSpec, family: Family, stats: &MacsStats) -> (f64, f64, f64) {
    let (mut conv, mut point) = (0.0, 0.0);
    visit_macs(spec, family, stats, &mut |cost| {
        if cost.conv {
            conv += cost.macs;
        } else {
            point += cost.macs;
        }
    });
    (conv, point, conv + point)
}

/// Exact MACs of one scene: the analytic model applied to that scene's own
/// kernel-map counts.
pub fn count_macs(
    spec: &ArchSpec,
    family: Family,
    counts: &crate::pipeline::PipelineCounts,
) -> MacsReport {
    let stats = crate::pipeline::estimate_kernel_map_sizes(&[*counts])
        .expect("single scene is a valid calibration set");
    macs_breakdown(spec, family, &stats)
}
