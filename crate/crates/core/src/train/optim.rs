//! Adam with optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// 0 means `1/√d_model`.
    pub init_scale: f64,
    /// Cutoff for the validation metrics in the epoch report.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            epochs: 10,
            grad_clip_norm: 5.0,
            shuffle_seed: 0,
            init_seed: 0,
            init_scale: 0.0,
            eval_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.grad_clip_norm >= 0.0) {
            return fail("grad_clip_norm must be non-negative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be non-negative".into());
        }
        if self.eval_k == 0 {
            return fail("eval_k must be at least 1".into());
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update. Returns the gradient norm before clipping.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradient tensors", params.len()),
            format!("{} gradients, {} moments", grads.len(), state.m.len()),
        ));
    }
    for ((_, name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{name} {:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g * clip;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            *w -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![value])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p.get(p.find("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut p = one(0.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::from_vec(vec![g])], &mut st, &cfg).unwrap();
            let w = p.get(p.find("w").unwrap()).data()[0];
            let expect = -cfg.learning_rate * g.signum();
            assert!((w - expect).abs() <= cfg.learning_rate * cfg.adam_epsilon / g.abs() * 1.01);
        }
    }

    #[test]
    fn clipping_caps_the_update_input() {
        let cfg = TrainConfig {
            grad_clip_norm: 1.0,
            ..Default::default()
        };
        let mut p = one(0.0);
        let mut st = AdamState::new(&p);
        let n = adam_step(&mut p, &[Tensor::from_vec(vec![10.0])], &mut st, &cfg).unwrap();
        assert_eq!(n, 10.0);
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = one(0.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &TrainConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut st, &TrainConfig::default()).is_err());
    }
}
