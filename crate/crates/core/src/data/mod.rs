//! Synthetic scene generation, KITTI-convention file I/O, and dataset
//! directory handling.

mod gen;
mod io;

pub use gen::{
    generate_scene, Scene, SceneGenConfig, CLASS_CLUTTER, CLASS_GROUND, CLASS_LARGE, CLASS_SMALL,
};
pub use io::{
    load_dataset, load_scene_pair, read_labels, read_points_bin, write_dataset, write_labels,
    write_points_bin, Dataset, DatasetMeta,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    BadRecordSize {
        path: String,
        len: u64,
        record: usize,
    },
    #[error("paired files disagree: {points_path} has {points} points but {labels_path} has {labels} labels")]
    PairMismatch {
        points_path: String,
        labels_path: String,
        points: usize,
        labels: usize,
    },
    #[error("infeasible scene config: {0}")]
    InfeasibleConfig(String),
    #[error("bad dataset metadata at {path}: {reason}")]
    BadMeta { path: String, reason: String },
}
