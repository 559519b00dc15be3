//! Adam with bias correction and an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdtError};
use crate::model::Parameters;
use crate::numerics::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPSILON: f64 = 1e-9;

/// `lr(step) = peak · min(step / warmup, √(warmup / step))` for `step ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step == 0 {
            return 0.0;
        }
        let s = step as f64;
        if self.warmup == 0 {
            return self.peak;
        }
        let w = self.warmup as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// Optimiser state: step counter and first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with learning rate `lr`. Leaves everything untouched and
/// reports the first offending tensor if a gradient is not finite.
pub fn adam_step(state: &mut AdamState, params: &mut Parameters, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(SmdtError::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.shape() != p.shape() {
            return Err(SmdtError::shape(
                "adam_step",
                format!("gradient {:?} for parameter `{}` {:?}", g.shape(), params.names()[i], p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(SmdtError::Divergence {
                step: state.step + 1,
                detail: format!("non-finite gradient for `{}`", params.names()[i]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 10,
                d_model: 8,
                d_ff: 8,
                num_heads: 8,
                num_layers: 1,
                two_stream_top_layers: 1,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn grads_like(p: &Parameters, value: f64) -> Vec<Tensor> {
        p.tensors().iter().map(|t| Tensor::filled(t.shape().to_vec(), value)).collect()
    }

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule { peak: 5e-4, warmup: 400 };
        assert!(s.at(1) < s.at(400));
        assert!((s.at(400) - 5e-4).abs() < 1e-18);
        assert!(s.at(1600) < s.at(400));
        assert!((s.at(1600) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut model = tiny();
        let before = model.parameters().clone();
        let mut state = AdamState::new(&before);
        let grads = grads_like(&before, -3.0);
        adam_step(&mut state, model.parameters_mut(), &grads, 0.01).unwrap();
        for (a, b) in model.parameters().tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters() {
        let mut model = tiny();
        let before = model.parameters().clone();
        let mut state = AdamState::new(&before);
        adam_step(&mut state, model.parameters_mut(), &grads_like(&before, 0.0), 0.1).unwrap();
        assert_eq!(model.parameters(), &before);
        adam_step(&mut state, model.parameters_mut(), &grads_like(&before, 2.0), 0.0).unwrap();
        assert_eq!(model.parameters(), &before);
        adam_step(&mut state, model.parameters_mut(), &grads_like(&before, 0.0), 0.0).unwrap();
        assert!(state.m[0].data()[0] > 0.0 && state.m[0].data()[0] < 0.2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut model = tiny();
        let before = model.parameters().clone();
        let mut state = AdamState::new(&before);
        let mut grads = grads_like(&before, 1.0);
        grads[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut state, model.parameters_mut(), &grads, 0.1).unwrap_err();
        assert!(matches!(err, SmdtError::Divergence { .. }));
        assert_eq!(model.parameters(), &before);
        assert_eq!(state.step, 0);
    }
}
