//! KITTI-convention binary files and the dataset directory layout.
//!
//! Point files are little-endian `f32` records of (x, y, z, intensity); label
//! files are little-endian `u32` words whose low 16 bits carry the semantic
//! class (the high bits are an instance id and are ignored on read). A
//! dataset directory holds `velodyne/NNNNNN.bin`, `labels/NNNNNN.label`, and
//! a `meta.json` declaring the train/validation split.

use super::gen::{generate_scene, Scene, SceneGenConfig};
use super::DataError;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads an (x, y, z, intensity) point file.
pub fn read_points_bin(path: &Path) -> Result<(Vec<[f32; 3]>, Vec<f32>), DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(DataError::BadRecordSize {
            path: path.display().to_string(),
            len: bytes.len() as u64,
            record: 16,
        });
    }
    let n = bytes.len() / 16;
    let mut positions = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        positions.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    Ok((positions, intensity))
}

pub fn write_points_bin(
    path: &Path,
    positions: &[[f32; 3]],
    intensity: &[f32],
) -> Result<(), DataError> {
    assert_eq!(positions.len(), intensity.len());
    let mut bytes = Vec::with_capacity(positions.len() * 16);
    for (p, &i) in positions.iter().zip(intensity) {
        for v in [p[0], p[1], p[2], i] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(io_err(path))
}

/// Reads a label file; the low 16 bits of each word are the class.
pub fn read_labels(path: &Path) -> Result<Vec<u32>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::BadRecordSize {
            path: path.display().to_string(),
            len: bytes.len() as u64,
            record: 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|w| u32::from_le_bytes(w.try_into().unwrap()) & 0xFFFF)
        .collect())
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(io_err(path))
}

/// Loads a point/label pair, enforcing equal record counts.
pub fn load_scene_pair(points_path: &Path, labels_path: &Path) -> Result<Scene, DataError> {
    let (positions, intensity) = read_points_bin(points_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != positions.len() {
        return Err(DataError::PairMismatch {
            points_path: points_path.display().to_string(),
            labels_path: labels_path.display().to_string(),
            points: positions.len(),
            labels: labels.len(),
        });
    }
    Ok(Scene {
        positions,
        intensity,
        labels,
        id: 0,
    })
}

/// Split declaration and provenance of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: SceneGenConfig,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

fn scene_paths(dir: &Path, id: u64) -> (PathBuf, PathBuf) {
    (
        dir.join("velodyne").join(format!("{id:06}.bin")),
        dir.join("labels").join(format!("{id:06}.label")),
    )
}

/// Generates `count` scenes, writes them in the KITTI layout, and declares a
/// split: the trailing `val_fraction` of scene ids validate, the rest train.
pub fn write_dataset(
    dir: &Path,
    cfg: &SceneGenConfig,
    count: usize,
    val_fraction: f64,
) -> Result<DatasetMeta, DataError> {
    fs::create_dir_all(dir.join("velodyne")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("labels")).map_err(io_err(dir))?;
    let val_count = ((count as f64 * val_fraction).round() as usize).min(count);
    let train_count = count - val_count;
    let mut meta = DatasetMeta {
        config: cfg.clone(),
        train_ids: (0..train_count as u64).collect(),
        val_ids: (train_count as u64..count as u64).collect(),
    };
    meta.train_ids.sort_unstable();
    meta.val_ids.sort_unstable();
    for id in 0..count as u64 {
        let scene = generate_scene(cfg, id)?;
        let (pp, lp) = scene_paths(dir, id);
        write_points_bin(&pp, &scene.positions, &scene.intensity)?;
        write_labels(&lp, &scene.labels)?;
    }
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&serde_json::to_value(&meta).expect("meta serializes"))
        .expect("meta prints");
    fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    Ok(meta)
}

/// Loads a dataset directory written by [`write_dataset`] (or hand-assembled
/// in the same layout).
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::BadMeta {
        path: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let overlap: Vec<u64> = meta
        .train_ids
        .iter()
        .filter(|id| meta.val_ids.contains(id))
        .copied()
        .collect();
    if !overlap.is_empty() {
        return Err(DataError::BadMeta {
            path: meta_path.display().to_string(),
            reason: format!("train/val ids overlap: {overlap:?}"),
        });
    }
    let load = |ids: &[u64]| -> Result<Vec<Scene>, DataError> {
        ids.iter()
            .map(|&id| {
                let (pp, lp) = scene_paths(dir, id);
                let mut s = load_scene_pair(&pp, &lp)?;
                s.id = id;
                Ok(s)
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&meta.train_ids)?,
        val: load(&meta.val_ids)?,
        meta,
    })
}
