use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-decay Adam update with bias-corrected moments, then
    /// clears the gradients. Nothing is updated if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {}", p.name)));
        }
        if self.m.len() != store.len() {
            return Err(Error::Training("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one, eps) = (S::one(), S::lit(c.eps));
        let decay = S::lit(1.0 - lr * c.weight_decay);
        let (lr, bc1, bc2) = (S::lit(lr), S::lit(bc1), S::lit(bc2));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for (k, ((m, v), w)) in m.data_mut().iter_mut().zip(v.data_mut()).zip(w).enumerate() {
                *m = b1 * *m + (one - b1) * g[k];
                *v = b2 * *v + (one - b2) * g[k] * g[k];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Linear warmup from 0 over `ceil(ratio · total)` steps, then linear decay to 0.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if step < warm {
        peak * step as f64 / warm as f64
    } else if total == warm {
        peak
    } else {
        peak * (total - step) as f64 / (total - warm) as f64
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the factor applied.
pub fn clip_gradients<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().as_f64();
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = S::lit(scale);
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(values.to_vec())).unwrap();
        s.get_mut(id).grad.data_mut().copy_from_slice(grads);
        s
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(&[0.5, -2.0], &[0.0, 0.0]);
        let mut opt = OptimizerState::new(&s, no_decay());
        for _ in 0..5 {
            opt.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = store(&[1.0], &[1.0]);
        let mut opt = OptimizerState::new(&s, no_decay());
        opt.step(&mut s, 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the update is 0.1 / (1 + 1e-8).
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().value.data()[0] - want).abs() < 1e-15);
        assert!(s.iter().next().unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_gradient_steps_approach_sign() {
        let mut s = store(&[0.0, 0.0], &[3.0, -0.02]);
        let mut opt = OptimizerState::new(&s, no_decay());
        let mut prev = [0.0, 0.0];
        for k in 0..200 {
            let id = s.ids().next().unwrap();
            s.get_mut(id).grad.data_mut().copy_from_slice(&[3.0, -0.02]);
            opt.step(&mut s, 0.01).unwrap();
            let now = s.get(id).value.data().to_vec();
            if k > 100 {
                assert!(((now[0] - prev[0]) + 0.01).abs() < 1e-6);
                assert!(((now[1] - prev[1]) - 0.01).abs() < 1e-6);
            }
            prev = [now[0], now[1]];
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut s = store(&[2.0], &[0.0]);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.5).unwrap();
        assert!((s.iter().next().unwrap().value.data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[1.0], &[f64::NAN]);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        match opt.step(&mut s, 0.1) {
            Err(Error::Training(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn schedule_end_points() {
        let (total, peak) = (100, 1e-3);
        assert_eq!(lr_at(0, total, peak, 0.06), 0.0);
        assert_eq!(lr_at(6, total, peak, 0.06), peak);
        assert!((lr_at(3, total, peak, 0.06) - peak / 2.0).abs() < 1e-18);
        assert_eq!(lr_at(total, total, peak, 0.06), 0.0);
        assert_eq!(lr_at(0, total, peak, 0.0), peak);
        for s in 6..total {
            assert!(lr_at(s + 1, total, peak, 0.06) < lr_at(s, total, peak, 0.06));
        }
    }

    #[test]
    fn clipping_cases() {
        let mut s = store(&[0.0, 0.0], &[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut s, 1.0), 1.0);
        assert_eq!(s.iter().next().unwrap().grad.data(), &[0.3, 0.4]);
        let mut s = store(&[0.0, 0.0], &[1.2, 1.6]);
        assert_eq!(clip_gradients(&mut s, 1.0), 0.5);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        let mut s = store(&[0.0], &[0.0]);
        assert_eq!(clip_gradients(&mut s, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(g in prop::collection::vec(-1e3f64..1e3, 1..20), max in 1e-3f64..10.0) {
            let mut s = store(&vec![0.0; g.len()], &g);
            clip_gradients(&mut s, max);
            prop_assert!(s.grad_norm() <= max + 1e-9);
        }
    }
}
