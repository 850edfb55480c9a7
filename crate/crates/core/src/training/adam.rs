use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::models::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor, and
/// the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Gradients are cleared afterwards.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Optimizer(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
        let Some(g) = &p.grad else {
            return Err(TrainError::Optimizer(format!("no gradient for {name}")));
        };
        if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
            return Err(TrainError::Optimizer(format!("shape mismatch for {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let m_corr = (1.0 / (1.0 - b1.powi(t))) as f32;
    let v_corr = (1.0 / (1.0 - b2.powi(t))) as f32;
    for ((_, p), (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let g = p.grad.take().expect("checked above");
        let theta = p.data_mut();
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] * m_corr;
            let v_hat = v[i] * v_corr;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32, grad: f32) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("w", Tensor::scalar(value));
        p.get_mut("w").unwrap().grad = Some(vec![grad]);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0, 1.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut p, &mut s, &cfg).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-6);
        assert_eq!(s.t, 1);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = single(0.7, 0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            p.get_mut("w").unwrap().grad = Some(vec![0.0]);
            adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_is_scale_invariant() {
        for c in [0.1f32, 1.0, 10.0] {
            for sign in [1.0f32, -1.0] {
                let mut p = single(0.0, sign * c);
                let mut s = AdamState::new(&p);
                let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
                adam_step(&mut p, &mut s, &cfg).unwrap();
                let step = p.get("w").unwrap().item();
                assert!((step + 0.01 * sign).abs() < 1e-6, "c={c} step={step}");
            }
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = ModelParams::new();
        p.push("w", Tensor::scalar(0.0));
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &mut s, &AdamConfig::default()).is_err());
        assert_eq!(s.t, 0);
    }
}
