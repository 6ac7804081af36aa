use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let first = params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first[i]) {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pv = p.values_mut();
            let gv = g.values();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for j in 0..pv.len() {
                mv[j] = beta1 * mv[j] + (1.0 - beta1) * gv[j];
                vv[j] = beta2 * vv[j] + (1.0 - beta2) * gv[j] * gv[j];
                let m_hat = mv[j] / bias1;
                let v_hat = vv[j] / bias2;
                pv[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut p = Tensor::new(vec![3], vec![0.1, -2.5, 1e-300]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(state.step_count(), 5);
        assert!(state.first_moments()[0].values().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        state.step(&mut [&mut p], &[&Tensor::scalar(1.0)]).unwrap();
        let m0 = state.first_moments()[0].values()[0];
        let v0 = state.second_moments()[0].values()[0];
        state.step(&mut [&mut p], &[&Tensor::scalar(0.0)]).unwrap();
        assert!(state.first_moments()[0].values()[0] < m0);
        assert!(state.second_moments()[0].values()[0] < v0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        state.step(&mut [&mut p], &[&Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        assert!((p.values()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Independent scalar simulation of w ← w − lr·m̂/(√v̂+ε) on f(w) = w².
        let cfg = AdamConfig::default();
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * w_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w_ref -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            expected.push(w_ref);
        }

        let mut w = Tensor::scalar(1.0);
        let mut state = AdamState::new(cfg, &[&w]);
        let mut prev = 1.0f64;
        for want in expected {
            let g = Tensor::scalar(2.0 * w.values()[0]);
            state.step(&mut [&mut w], &[&g]).unwrap();
            let now = w.values()[0];
            assert!(now.abs() < prev.abs());
            assert!((now - want).abs() < 1e-15);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        let g = Tensor::zeros(&[3]);
        assert!(state.step(&mut [&mut p], &[&g]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
