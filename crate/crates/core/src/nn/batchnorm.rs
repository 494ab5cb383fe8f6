//! Per-channel batch normalization over rows.

use super::store::{ParamId, TensorKind, TensorStore};
use super::tensor::FeatureMatrix;
use super::NnError;

/// Batch statistics captured by a training-mode forward pass. The backward
/// pass needs them, and the running-statistics update is deferred to the
/// caller so that parallel workers can fold their statistics in a fixed order.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels_max: usize,
    pub active: usize,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormLayer {
    pub fn new(store: &mut TensorStore, name: &str, channels: usize) -> Self {
        let gamma = store.alloc(format!("{name}.gamma"), TensorKind::Param, channels);
        store.get_mut(gamma).fill(1.0);
        let beta = store.alloc(format!("{name}.beta"), TensorKind::Param, channels);
        let running_mean =
            store.alloc(format!("{name}.running_mean"), TensorKind::Buffer, channels);
        let running_var = store.alloc(format!("{name}.running_var"), TensorKind::Buffer, channels);
        store.get_mut(running_var).fill(1.0);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels_max: channels,
            active: channels,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    fn check_cols(&self, x: &FeatureMatrix, op: &'static str) -> Result<(), NnError> {
        if x.cols() != self.active {
            return Err(NnError::ShapeMismatch {
                op,
                expected: self.active,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Normalizes by batch statistics; returns them for the backward pass and
    /// the deferred running-stat update.
    pub fn forward_train(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
    ) -> Result<(FeatureMatrix, BnStats), NnError> {
        self.check_cols(x, "batchnorm_forward")?;
        let rows = x.rows();
        if rows < 2 {
            return Err(NnError::DegenerateBatch { rows });
        }
        let c = self.active;
        let mut mean = vec![0.0f32; c];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        let inv_n = 1.0 / rows as f32;
        for m in &mut mean {
            *m *= inv_n;
        }
        let mut var = vec![0.0f32; c];
        for r in 0..rows {
            for (j, &v) in x.row(r).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v *= inv_n;
        }

        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut out = FeatureMatrix::zeros(rows, c);
        for r in 0..rows {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for j in 0..c {
                let s = (var[j] + self.epsilon).sqrt();
                or[j] = gamma[j] * (xr[j] - mean[j]) / s + beta[j];
            }
        }
        Ok((out, BnStats { mean, var, rows }))
    }

    /// Normalizes by running statistics.
    pub fn forward_eval(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
    ) -> Result<FeatureMatrix, NnError> {
        self.check_cols(x, "batchnorm_forward")?;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let rm = ps.get(self.running_mean);
        let rv = ps.get(self.running_var);
        let mut out = FeatureMatrix::zeros(x.rows(), self.active);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for j in 0..self.active {
                let s = (rv[j] + self.epsilon).sqrt();
                or[j] = gamma[j] * (xr[j] - rm[j]) / s + beta[j];
            }
        }
        Ok(out)
    }

    /// Gradient through the batch statistics. Accumulates gamma/beta grads.
    /// `stats` must come from the training-mode forward; passing `None`
    /// (an inference-mode pass saves no statistics) is an error.
    pub fn backward(
        &self,
        ps: &TensorStore,
        x: &FeatureMatrix,
        stats: Option<&BnStats>,
        grad_out: &FeatureMatrix,
        gs: &mut TensorStore,
    ) -> Result<FeatureMatrix, NnError> {
        let stats = stats.ok_or(NnError::UnsupportedMode)?;
        let rows = x.rows();
        let c = self.active;
        debug_assert_eq!(stats.rows, rows);
        let gamma = ps.get(self.gamma);

        // Per-column reductions over xhat and grad_out.
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for r in 0..rows {
            let xr = x.row(r);
            let gr = grad_out.row(r);
            for j in 0..c {
                let s = (stats.var[j] + self.epsilon).sqrt();
                let xhat = (xr[j] - stats.mean[j]) / s;
                sum_g[j] += gr[j];
                sum_gx[j] += gr[j] * xhat;
            }
        }

        {
            let gg = gs.get_mut(self.gamma);
            for j in 0..c {
                gg[j] += sum_gx[j];
            }
        }
        {
            let bg = gs.get_mut(self.beta);
            for j in 0..c {
                bg[j] += sum_g[j];
            }
        }

        let inv_n = 1.0 / rows as f32;
        let mut grad_in = FeatureMatrix::zeros(rows, c);
        for r in 0..rows {
            let xr = x.row(r);
            let gr = grad_out.row(r);
            let gi = grad_in.row_mut(r);
            for j in 0..c {
                let s = (stats.var[j] + self.epsilon).sqrt();
                let xhat = (xr[j] - stats.mean[j]) / s;
                gi[j] = gamma[j] / s * inv_n * (rows as f32 * gr[j] - sum_g[j] - xhat * sum_gx[j]);
            }
        }
        Ok(grad_in)
    }

    /// Folds batch statistics into the running estimates. The running
    /// variance uses the unbiased estimate, matching common framework
    /// convention.
    pub fn update_running(&self, ps: &mut TensorStore, stats: &BnStats) {
        let m = self.momentum;
        let unbias = if stats.rows > 1 {
            stats.rows as f32 / (stats.rows as f32 - 1.0)
        } else {
            1.0
        };
        {
            let rm = ps.get_mut(self.running_mean);
            for j in 0..self.active {
                rm[j] = (1.0 - m) * rm[j] + m * stats.mean[j];
            }
        }
        {
            let rv = ps.get_mut(self.running_var);
            for j in 0..self.active {
                rv[j] = (1.0 - m) * rv[j] + m * stats.var[j] * unbias;
            }
        }
    }

    /// Overwrites running statistics with externally aggregated values over
    /// the leading `active` channels (used by calibration).
    pub fn set_running(&self, ps: &mut TensorStore, mean: &[f32], var: &[f32]) {
        ps.get_mut(self.running_mean)[..self.active].copy_from_slice(&mean[..self.active]);
        ps.get_mut(self.running_var)[..self.active].copy_from_slice(&var[..self.active]);
    }
}
