//! Output and loading helpers shared by the subcommands.

use spvox_core::backbone::Family;
use spvox_core::data::load_dataset;
use spvox_core::nas::{prepare_scenes, PreparedScene};
use spvox_core::ArchSpec;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn from_display(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

macro_rules! from_error {
    ($t:ty) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::from_display(e)
            }
        }
    };
}
from_error!(spvox_core::data::DataError);
from_error!(spvox_core::nas::NasError);
from_error!(spvox_core::backbone::BackboneError);
from_error!(spvox_core::coords::CoordError);
from_error!(std::io::Error);
from_error!(serde_json::Error);

pub type CliResult = Result<(), CliError>;

/// Progress printer with an optional elapsed-seconds prefix.
pub struct Printer {
    start: Instant,
    timestamps: bool,
}

impl Printer {
    pub fn new(timestamps: bool) -> Self {
        Self {
            start: Instant::now(),
            timestamps,
        }
    }

    pub fn line(&self, msg: impl std::fmt::Display) {
        if self.timestamps {
            println!("[{:8.2}s] {msg}", self.start.elapsed().as_secs_f64());
        } else {
            println!("{msg}");
        }
    }
}

pub fn parse_family(name: &str) -> Result<Family, CliError> {
    match name {
        "point-voxel" | "point_voxel" => Ok(Family::PointVoxel),
        "voxel-only" | "voxel_only" => Ok(Family::VoxelOnly),
        other => Err(CliError::Data(format!(
            "unknown family `{other}` (expected point-voxel or voxel-only)"
        ))),
    }
}

pub fn load_arch(path: &Path) -> Result<ArchSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let spec = ArchSpec::from_json(&text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_space(path: &Path) -> Result<spvox_core::nas::SearchSpace, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let space: spvox_core::nas::SearchSpace = serde_json::from_str(&text)?;
    space.validate()?;
    Ok(space)
}

pub struct PreparedDataset {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

pub fn load_prepared(dir: &Path, voxel_size: f64) -> Result<PreparedDataset, CliError> {
    let raw = load_dataset(dir)?;
    let train = prepare_scenes(&raw.train, voxel_size as f32)?;
    let val = prepare_scenes(&raw.val, voxel_size as f32)?;
    Ok(PreparedDataset { train, val })
}

pub fn default_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(8))
        .unwrap_or(1)
}

pub fn class_name(index: usize) -> String {
    match index {
        0 => "ground".to_string(),
        1 => "large".to_string(),
        2 => "small".to_string(),
        3 => "clutter".to_string(),
        other => format!("class{other}"),
    }
}
