//! Parameter updates: an adaptive-moment optimizer (the default) and plain
//! SGD. State is kept per tensor in the model's fixed parameter order, and
//! `reset` zeroes all moments and the step counter while leaving parameters
//! untouched — the hand-off between the two training stages.

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adaptive-moment")]
    AdaptiveMoment,
    #[serde(rename = "plain-sgd")]
    PlainSgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Zeroes moments and the step counter.
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients) {
        let params = state.param_tensors_mut();
        let gs = grads.tensors();
        debug_assert_eq!(params.len(), gs.len());
        match self.kind {
            OptimizerKind::PlainSgd => {
                self.step_count += 1;
                for (p, g) in params.into_iter().zip(gs) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = gs.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                self.step_count += 1;
                let t = self.step_count as i32;
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for ((p, g), (m, v)) in params
                    .into_iter()
                    .zip(gs)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn tiny_state() -> ModelState {
        let dims = ModelDims {
            dim: 4,
            encoder_widths: vec![3, 2],
            head_hidden: vec![],
            proxies_per_class: 1,
        };
        ModelState::init(&dims, 1).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut state = tiny_state();
        let before: Vec<f64> = state.param_tensors()[0].to_vec();
        let mut grads = Gradients::zeros(state.dims());
        grads.enc_w[0][(0, 0)] = 2.0;
        let mut opt = Optimizer::new(OptimizerKind::PlainSgd, 0.1);
        opt.step(&mut state, &grads);
        let after = state.param_tensors()[0].to_vec();
        assert!((after[0] - (before[0] - 0.2)).abs() < 1e-15);
        assert_eq!(after[1], before[1]);
    }

    #[test]
    fn adaptive_first_step_size_is_learning_rate() {
        // with bias correction the first update has magnitude ~lr regardless
        // of gradient scale
        let mut state = tiny_state();
        let before = state.param_tensors()[0][0];
        let mut grads = Gradients::zeros(state.dims());
        grads.enc_w[0][(0, 0)] = 123.0;
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, 1e-3);
        opt.step(&mut state, &grads);
        let after = state.param_tensors()[0][0];
        assert!(((before - after) / 1e-3 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reset_zeroes_moments_but_not_parameters() {
        let mut state = tiny_state();
        let mut grads = Gradients::zeros(state.dims());
        grads.enc_w[0][(0, 0)] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, 1e-2);
        opt.step(&mut state, &grads);
        opt.step(&mut state, &grads);
        let params_before_reset = state.param_fingerprint();
        opt.reset();
        assert_eq!(opt.step_count(), 0);
        assert_eq!(state.param_fingerprint(), params_before_reset);
        // next step behaves like a first step again
        let before = state.param_tensors()[0][0];
        opt.step(&mut state, &grads);
        let after = state.param_tensors()[0][0];
        assert!(((before - after) / 1e-2 - 1.0).abs() < 1e-6);
    }
}
