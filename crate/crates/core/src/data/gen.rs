//! Deterministic synthetic outdoor scenes: a ground plane, large boxes,
//! small upright cylinders, and scattered clutter.
//!
//! The task is built so that small objects fit well inside one coarse cell
//! after four downsamplings: their geometry survives only at high
//! resolution. Intensity distributions overlap between classes but small
//! objects skew bright, so per-point detail carries real signal.

use super::DataError;
use crate::coords::PointTensor;
use crate::nn::FeatureMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CLASS_GROUND: u32 = 0;
pub const CLASS_LARGE: u32 = 1;
pub const CLASS_SMALL: u32 = 2;
pub const CLASS_CLUTTER: u32 = 3;

/// Generator configuration. All lengths in meters, densities in points per
/// square meter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGenConfig {
    /// Scene footprint (x, y), centered on the origin.
    pub extent: [f64; 2],
    pub ground_density: f64,
    pub ground_z_jitter: f64,
    /// Inclusive count range for large boxes (~2 x 4 x 1.5 m).
    pub large_count: [usize; 2],
    pub large_size: [f64; 3],
    pub large_density: f64,
    /// Inclusive count range for small cylinders (~0.4 m footprint).
    pub small_count: [usize; 2],
    pub small_radius: f64,
    pub small_height: f64,
    pub small_density: f64,
    /// Clutter points as a fraction of the structured points.
    pub clutter_fraction: f64,
    pub clutter_height: f64,
    /// Base seed mixed with the per-scene seed.
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            extent: [16.0, 16.0],
            ground_density: 6.0,
            ground_z_jitter: 0.04,
            large_count: [3, 5],
            large_size: [2.0, 4.0, 1.5],
            large_density: 5.0,
            small_count: [3, 4],
            small_radius: 0.2,
            small_height: 1.7,
            small_density: 7.0,
            clutter_fraction: 0.06,
            clutter_height: 2.5,
            seed: 0,
        }
    }
}

/// One labeled scan: positions, intensity, per-point class.
#[derive(Debug, Clone)]
pub struct Scene {
    pub positions: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
    pub labels: Vec<u32>,
    pub id: u64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Network input: features are (x, y, z, intensity) per point.
    pub fn to_point_tensor(&self) -> PointTensor {
        let n = self.len();
        let mut feats = FeatureMatrix::zeros(n, 4);
        for i in 0..n {
            let row = feats.row_mut(i);
            row[0] = self.positions[i][0];
            row[1] = self.positions[i][1];
            row[2] = self.positions[i][2];
            row[3] = self.intensity[i];
        }
        PointTensor::new(self.positions.clone(), feats, vec![0; n])
    }

    pub fn class_share(&self, class: u32) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == class).count() as f64 / self.len() as f64
    }
}

fn intensity_for(class: u32, rng: &mut ChaCha8Rng) -> f32 {
    // Overlapping bands; small objects skew bright (retroreflective), ground
    // dull. The overlap keeps intensity alone insufficient.
    let (lo, hi) = match class {
        CLASS_GROUND => (0.10, 0.40),
        CLASS_LARGE => (0.25, 0.60),
        CLASS_SMALL => (0.55, 0.95),
        _ => (0.05, 0.90),
    };
    rng.random_range(lo..hi) as f32
}

/// Deterministic scene synthesis: the same `(config, seed)` yields the same
/// scene bit for bit on every platform (integer-seeded ChaCha stream,
/// fixed sampling order).
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene, DataError> {
    let [ex, ey] = cfg.extent;
    if ex <= 0.0 || ey <= 0.0 {
        return Err(DataError::InfeasibleConfig("non-positive extent".into()));
    }
    if cfg.large_size[0] > ex || cfg.large_size[1] > ey {
        return Err(DataError::InfeasibleConfig(format!(
            "large objects ({} x {}) exceed the extent ({ex} x {ey})",
            cfg.large_size[0], cfg.large_size[1]
        )));
    }
    if 2.0 * cfg.small_radius > ex.min(ey) {
        return Err(DataError::InfeasibleConfig(
            "small objects exceed the extent".into(),
        ));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
        crate::derive_seed(cfg.seed, "scene").wrapping_add(seed),
    );
    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    let mut push = |p: [f32; 3], class: u32, rng: &mut ChaCha8Rng| {
        positions.push(p);
        intensity.push(intensity_for(class, rng));
        labels.push(class);
    };

    // Ground plane.
    let ground_n = (cfg.ground_density * ex * ey).round() as usize;
    for _ in 0..ground_n {
        let x = rng.random_range(-ex / 2.0..ex / 2.0) as f32;
        let y = rng.random_range(-ey / 2.0..ey / 2.0) as f32;
        let z = rng.random_range(-cfg.ground_z_jitter..cfg.ground_z_jitter) as f32;
        push([x, y, z], CLASS_GROUND, &mut rng);
    }

    // Large boxes: surface-sampled cuboids with random yaw.
    let n_large = rng.random_range(cfg.large_count[0]..=cfg.large_count[1]);
    for _ in 0..n_large {
        let sx = cfg.large_size[0] * rng.random_range(0.8..1.2);
        let sy = cfg.large_size[1] * rng.random_range(0.8..1.2);
        let sz = cfg.large_size[2] * rng.random_range(0.8..1.2);
        let cx = rng.random_range(-(ex / 2.0 - sy / 2.0)..(ex / 2.0 - sy / 2.0));
        let cy = rng.random_range(-(ey / 2.0 - sy / 2.0)..(ey / 2.0 - sy / 2.0));
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = yaw.sin_cos();
        let area_side_x = 2.0 * sy * sz;
        let area_side_y = 2.0 * sx * sz;
        let area_top = sx * sy;
        let total = area_side_x + area_side_y + area_top;
        let n = (cfg.large_density * total).round() as usize;
        for _ in 0..n {
            let u = rng.random_range(0.0..total);
            // Local box coordinates before yaw.
            let (lx, ly, lz) = if u < area_side_x {
                let side = if rng.random_range(0..2) == 0 {
                    -0.5
                } else {
                    0.5
                };
                (
                    side * sx,
                    rng.random_range(-0.5..0.5) * sy,
                    rng.random_range(0.0..sz),
                )
            } else if u < area_side_x + area_side_y {
                let side = if rng.random_range(0..2) == 0 {
                    -0.5
                } else {
                    0.5
                };
                (
                    rng.random_range(-0.5..0.5) * sx,
                    side * sy,
                    rng.random_range(0.0..sz),
                )
            } else {
                (
                    rng.random_range(-0.5..0.5) * sx,
                    rng.random_range(-0.5..0.5) * sy,
                    sz,
                )
            };
            let x = cx + lx * cos - ly * sin;
            let y = cy + lx * sin + ly * cos;
            push([x as f32, y as f32, lz as f32], CLASS_LARGE, &mut rng);
        }
    }

    // Small cylinders: lateral surface plus cap.
    let n_small = rng.random_range(cfg.small_count[0]..=cfg.small_count[1]);
    for _ in 0..n_small {
        let r = cfg.small_radius * rng.random_range(0.8..1.2);
        let h = cfg.small_height * rng.random_range(0.85..1.15);
        let cx = rng.random_range(-(ex / 2.0 - r)..(ex / 2.0 - r));
        let cy = rng.random_range(-(ey / 2.0 - r)..(ey / 2.0 - r));
        let lateral = std::f64::consts::TAU * r * h;
        let cap = std::f64::consts::PI * r * r;
        let n = (cfg.small_density * (lateral + cap)).round().max(6.0) as usize;
        for _ in 0..n {
            let u = rng.random_range(0.0..lateral + cap);
            let (x, y, z) = if u < lateral {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                (
                    cx + r * theta.cos(),
                    cy + r * theta.sin(),
                    rng.random_range(0.0..h),
                )
            } else {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let rr = r * rng.random_range(0.0f64..1.0).sqrt();
                (cx + rr * theta.cos(), cy + rr * theta.sin(), h)
            };
            push([x as f32, y as f32, z as f32], CLASS_SMALL, &mut rng);
        }
    }

    // Clutter. The structured pushes are done; mutate the buffers directly.
    let n_clutter = (cfg.clutter_fraction * labels.len() as f64).round() as usize;
    for _ in 0..n_clutter {
        let x = rng.random_range(-ex / 2.0..ex / 2.0) as f32;
        let y = rng.random_range(-ey / 2.0..ey / 2.0) as f32;
        let z = rng.random_range(0.0..cfg.clutter_height) as f32;
        positions.push([x, y, z]);
        intensity.push(intensity_for(CLASS_CLUTTER, &mut rng));
        labels.push(CLASS_CLUTTER);
    }

    Ok(Scene {
        positions,
        intensity,
        labels,
        id: seed,
    })
}
