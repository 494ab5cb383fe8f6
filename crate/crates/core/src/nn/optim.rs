//! SGD with momentum and the half-cosine learning-rate schedule.

use super::store::{TensorKind, TensorStore};
use super::NnError;

/// `0.5 * base * (1 + cos(pi * step / total))`.
pub fn cosine_lr(base_lr: f32, step: usize, total_steps: usize) -> f32 {
    assert!(total_steps > 0);
    let frac = step as f64 / total_steps as f64;
    (0.5 * base_lr as f64 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

/// Momentum-SGD state. Velocity buffers mirror the parameter store layout.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: TensorStore,
}

impl SgdState {
    pub fn new(params: &TensorStore, learning_rate: f32, momentum: f32) -> Self {
        assert!((0.0..1.0).contains(&momentum));
        assert!(learning_rate > 0.0);
        Self {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    /// `v = momentum * v + g; p -= lr * v` for every learnable parameter.
    /// Buffers are skipped. Aborts on any non-finite gradient, naming the
    /// offending tensor.
    pub fn step(&mut self, params: &mut TensorStore, grads: &TensorStore) -> Result<(), NnError> {
        for id in grads.ids() {
            if grads.kind(id) != TensorKind::Param {
                continue;
            }
            if let Some(index) = grads.get(id).iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    name: grads.name(id).to_string(),
                    index,
                });
            }
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.kind(id) != TensorKind::Param {
                continue;
            }
            let g = grads.get(id);
            let v = self.velocity.get_mut(id);
            let p = params.get_mut(id);
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= self.learning_rate * v[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> TensorStore {
        let mut ps = TensorStore::new();
        let id = ps.alloc("p", TensorKind::Param, 1);
        ps.get_mut(id)[0] = value;
        ps
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut ps = one_param(1.0);
        let mut gs = ps.zeros_like();
        gs.get_mut(super::super::ParamId(0))[0] = 1.0;
        let mut sgd = SgdState::new(&ps, 0.1, 0.0);
        sgd.step(&mut ps, &gs).unwrap();
        assert!((ps.get(super::super::ParamId(0))[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates_over_steps() {
        let mut ps = one_param(1.0);
        let mut gs = ps.zeros_like();
        gs.get_mut(super::super::ParamId(0))[0] = 1.0;
        let mut sgd = SgdState::new(&ps, 0.1, 0.9);
        sgd.step(&mut ps, &gs).unwrap();
        assert!((ps.get(super::super::ParamId(0))[0] - 0.9).abs() < 1e-6);
        sgd.step(&mut ps, &gs).unwrap();
        assert!((ps.get(super::super::ParamId(0))[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut ps = one_param(0.75);
        let gs = ps.zeros_like();
        let mut sgd = SgdState::new(&ps, 0.1, 0.9);
        sgd.step(&mut ps, &gs).unwrap();
        assert_eq!(ps.get(super::super::ParamId(0))[0], 0.75);
    }

    #[test]
    fn non_finite_gradient_aborts_with_tensor_name() {
        let mut ps = one_param(1.0);
        let mut gs = ps.zeros_like();
        gs.get_mut(super::super::ParamId(0))[0] = f32::NAN;
        let mut sgd = SgdState::new(&ps, 0.1, 0.0);
        let err = sgd.step(&mut ps, &gs).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert!((cosine_lr(0.24, 0, 100) - 0.24).abs() < 1e-7);
        assert!((cosine_lr(0.24, 50, 100) - 0.12).abs() < 1e-7);
        assert!(cosine_lr(0.24, 100, 100).abs() < 1e-9);
    }
}
