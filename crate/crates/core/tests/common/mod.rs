//! Shared test support: 64-bit reference forwards and the central
//! finite-difference harness.
//!
//! The reference implementations here are written independently of the
//! library's forward/backward code paths: plain f64 loops, corner lookups
//! through a `BTreeMap`, and explicit softmax. They exist so analytic f32
//! gradients can be checked against numeric derivatives of a 64-bit forward.

#![allow(dead_code)]

pub mod gradchecks;

use spvox_core::conv::{KernelMap, ResidualBlock, SparseConvLayer};
use spvox_core::coords::{Coord, VoxelizeMap};
use spvox_core::nn::{BatchNormLayer, FeatureMatrix, LinearLayer, ParamId, TensorStore};
use std::collections::BTreeMap;

/// Row-major f64 matrix for the reference path.
#[derive(Debug, Clone)]
pub struct M64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_f32(m: &FeatureMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Read-through view of an f32 parameter store with one optional perturbed
/// element.
pub struct P64<'a> {
    pub ps: &'a TensorStore,
    pub perturb: Option<(ParamId, usize, f64)>,
}

impl<'a> P64<'a> {
    pub fn new(ps: &'a TensorStore) -> Self {
        Self { ps, perturb: None }
    }

    pub fn with(ps: &'a TensorStore, id: ParamId, index: usize, delta: f64) -> Self {
        Self {
            ps,
            perturb: Some((id, index, delta)),
        }
    }

    pub fn get(&self, id: ParamId, index: usize) -> f64 {
        let base = self.ps.get(id)[index] as f64;
        match self.perturb {
            Some((pid, pidx, delta)) if pid == id && pidx == index => base + delta,
            _ => base,
        }
    }
}

/// `y = W x + b` with dense views.
pub fn linear64(p: &P64, layer: &LinearLayer, x: &M64) -> M64 {
    let in_ch = layer.in_view.total();
    assert_eq!(
        layer.in_view.segs.len(),
        1,
        "reference path expects dense views"
    );
    assert_eq!(x.cols, in_ch);
    let mut out = M64::zeros(x.rows, layer.out_active);
    for r in 0..x.rows {
        for oc in 0..layer.out_active {
            let mut acc = layer.bias.map_or(0.0, |b| p.get(b, oc));
            for ic in 0..in_ch {
                acc += p.get(layer.weight, oc * layer.in_max + ic) * x.get(r, ic);
            }
            out.set(r, oc, acc);
        }
    }
    out
}

/// Training-mode batch norm with biased batch variance.
pub fn bn64(p: &P64, layer: &BatchNormLayer, x: &M64) -> M64 {
    let c = layer.active;
    assert_eq!(x.cols, c);
    let n = x.rows as f64;
    let mut mean = vec![0.0f64; c];
    for r in 0..x.rows {
        for j in 0..c {
            mean[j] += x.get(r, j) / n;
        }
    }
    let mut var = vec![0.0f64; c];
    for r in 0..x.rows {
        for j in 0..c {
            var[j] += (x.get(r, j) - mean[j]).powi(2) / n;
        }
    }
    let mut out = M64::zeros(x.rows, c);
    for r in 0..x.rows {
        for j in 0..c {
            let xhat = (x.get(r, j) - mean[j]) / (var[j] + layer.epsilon as f64).sqrt();
            out.set(r, j, p.get(layer.gamma, j) * xhat + p.get(layer.beta, j));
        }
    }
    out
}

thread_local! {
    static SIGN_HASH: std::cell::Cell<u64> = const { std::cell::Cell::new(0xcbf2_9ce4_8422_2325) };
}

/// Resets the ReLU sign-pattern accumulator (see [`sign_hash`]).
pub fn reset_sign_hash() {
    SIGN_HASH.with(|h| h.set(0xcbf2_9ce4_8422_2325));
}

/// Hash of every ReLU activation sign seen since the last reset. Two
/// evaluations with equal hashes lie in the same piecewise-linear region, so
/// a central difference between them is kink-free.
pub fn sign_hash() -> u64 {
    SIGN_HASH.with(std::cell::Cell::get)
}

pub fn relu64(x: &M64) -> M64 {
    let mut out = x.clone();
    SIGN_HASH.with(|h| {
        let mut acc = h.get();
        for v in &mut out.data {
            acc = (acc ^ u64::from(*v > 0.0)).wrapping_mul(0x0000_0100_0000_01b3);
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        h.set(acc);
    });
    out
}

/// Mean softmax cross-entropy (explicit softmax, max-shifted).
pub fn ce64(logits: &M64, labels: &[u32], ignore: Option<u32>) -> f64 {
    let counted = labels.iter().filter(|&&l| Some(l) != ignore).count() as f64;
    let mut loss = 0.0;
    for r in 0..logits.rows {
        if Some(labels[r]) == ignore {
            continue;
        }
        let row: Vec<f64> = (0..logits.cols).map(|c| logits.get(r, c)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += (denom.ln() - (row[labels[r] as usize] - max)) / counted;
    }
    loss
}

/// Sparse convolution over an explicit kernel map.
pub fn conv64(p: &P64, layer: &SparseConvLayer, x: &M64, kmap: &KernelMap) -> M64 {
    let in_ch = layer.in_view.total();
    assert_eq!(
        layer.in_view.segs.len(),
        1,
        "reference path expects dense views"
    );
    let mut out = M64::zeros(kmap.out_rows, layer.out_active);
    for (k, bucket) in kmap.pairs.iter().enumerate() {
        for &(i, o) in bucket {
            for oc in 0..layer.out_active {
                let mut acc = 0.0;
                for ic in 0..in_ch {
                    acc += p.get(layer.weight, (k * layer.out_max + oc) * layer.in_max + ic)
                        * x.get(i as usize, ic);
                }
                let cur = out.get(o as usize, oc);
                out.set(o as usize, oc, cur + acc);
            }
        }
    }
    out
}

/// Residual block: conv-bn-relu-conv-bn plus (projected) skip, final relu.
pub fn block64(p: &P64, block: &ResidualBlock, x: &M64, kmap: &KernelMap) -> M64 {
    let c1 = conv64(p, &block.conv1, x, kmap);
    let a1 = bn64(p, &block.bn1, &c1);
    let r1 = relu64(&a1);
    let c2 = conv64(p, &block.conv2, &r1, kmap);
    let a2 = bn64(p, &block.bn2, &c2);
    let skip = match &block.skip {
        Some(proj) => {
            let lin = linear64(p, &proj.linear, x);
            bn64(p, &proj.bn, &lin)
        }
        None => x.clone(),
    };
    let mut sum = a2;
    for (s, k) in sum.data.iter_mut().zip(&skip.data) {
        *s += *k;
    }
    relu64(&sum)
}

/// Mean pooling of point rows into voxel rows through a fixed assignment.
pub fn voxelize64(x: &M64, vmap: &VoxelizeMap) -> M64 {
    let mut out = M64::zeros(vmap.voxel_point_count.len(), x.cols);
    for (k, &row) in vmap.point_to_voxel.iter().enumerate() {
        for c in 0..x.cols {
            let cur = out.get(row as usize, c);
            out.set(row as usize, c, cur + x.get(k, c));
        }
    }
    for (row, &n) in vmap.voxel_point_count.iter().enumerate() {
        for c in 0..x.cols {
            let cur = out.get(row, c);
            out.set(row, c, cur / n as f64);
        }
    }
    out
}

/// Trilinear interpolation with corner lookup through a BTreeMap (fully
/// independent of the library's hash map).
pub fn devox64(
    positions: &[[f32; 3]],
    batch: &[i32],
    coords: &[Coord],
    feats: &M64,
    voxel_size: f64,
    stride: i32,
) -> M64 {
    let lookup: BTreeMap<(i32, i32, i32, i32), usize> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.batch, c.x, c.y, c.z), i))
        .collect();
    let cell = voxel_size * stride as f64;
    let mut out = M64::zeros(positions.len(), feats.cols);
    for (i, pos) in positions.iter().enumerate() {
        let mut base = [0i32; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let q = pos[a] as f64 / cell;
            base[a] = q.floor() as i32;
            t[a] = q - q.floor();
        }
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let key = (
                        batch[i],
                        (base[0] + dx) * stride,
                        (base[1] + dy) * stride,
                        (base[2] + dz) * stride,
                    );
                    if let Some(&row) = lookup.get(&key) {
                        let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                            * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                            * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                        for c in 0..feats.cols {
                            let cur = out.get(i, c);
                            out.set(i, c, cur + w * feats.get(row, c));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Projection loss `sum(out .* proj)`: turns any output matrix into the
/// scalar the finite differences run on.
pub fn proj_loss(out: &M64, proj: &M64) -> f64 {
    assert_eq!(out.rows, proj.rows);
    assert_eq!(out.cols, proj.cols);
    out.data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Central difference of a scalar function of one perturbation.
pub fn central_diff(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Central difference with a kink guard: `None` when the two evaluation
/// points fall into different ReLU sign patterns (the difference quotient
/// would straddle a nondifferentiable point).
pub fn central_diff_guarded(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    reset_sign_hash();
    let plus = f(FD_STEP);
    let hash_plus = sign_hash();
    reset_sign_hash();
    let minus = f(-FD_STEP);
    let hash_minus = sign_hash();
    (hash_plus == hash_minus).then(|| (plus - minus) / (2.0 * FD_STEP))
}

/// Relative-error acceptance: `|a - n| <= tol * max(|a|, |n|, 0.01)`. The
/// floor keeps near-zero gradients from demanding impossible precision; with
/// gradients of order one it is inactive.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_TOL * analytic.abs().max(numeric.abs()).max(0.01)
}

/// Deterministic index subset for spot-checking large tensors.
pub fn spread_indices(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    (0..want).map(|i| i * len / want).collect()
}
