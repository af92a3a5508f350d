//! Adam with bias correction, and a step-decay learning-rate schedule.

use crate::{Gradients, ParamSet, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched. If any gradient is non-finite nothing is
    /// modified and an error names the offending parameter.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for id in params.ids() {
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moments as a parameter set (`m/<name>` and `v/<name>`), for saving.
    pub fn moments(&self, params: &ParamSet<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (id, name, _) in params.iter() {
            out.insert(format!("m/{name}"), self.m[id.0].clone());
            out.insert(format!("v/{name}"), self.v[id.0].clone());
        }
        out
    }

    /// Inverse of [`AdamState::moments`].
    pub fn from_moments(params: &ParamSet<T>, moments: &ParamSet<T>, config: AdamConfig, step: u64) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (_, name, t) in params.iter() {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}/{name}");
                let x = moments
                    .by_name(&key)
                    .ok_or_else(|| TensorError::Invalid(format!("missing optimizer state {key}")))?;
                if x.shape() != t.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "optimizer state",
                        expected: t.shape().to_vec(),
                        got: x.shape().to_vec(),
                    });
                }
                dst.push(x.clone());
            }
        }
        Ok(AdamState { config, step, m, v })
    }
}

/// `lr(step) = base * gamma^floor(step / step_size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub gamma: f64,
    pub step_size: u64,
}

impl StepDecay {
    pub fn new(base: f64) -> Self {
        StepDecay {
            base,
            gamma: 0.995,
            step_size: 10_000,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.base * self.gamma.powi((step / self.step_size.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn one_param(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(&[1], vec![x]).unwrap());
        p
    }

    fn square_step(p: &mut ParamSet<f64>, adam: &mut AdamState<f64>, lr: f64) {
        let grads = {
            let mut tape = Tape::new(p);
            let x = tape.param_named("x");
            let x2 = tape.linear(x, x, None);
            tape.backward(x2)
        };
        adam.update(p, &grads, lr).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = one_param(0.7);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let grads = {
            let mut tape = Tape::new(&p);
            let x = tape.param_named("x");
            let z = tape.scale(x, 0.0);
            tape.backward(z)
        };
        for _ in 0..10 {
            adam.update(&mut p, &grads, 0.1).unwrap();
        }
        assert_eq!(p.by_name("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = one_param(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let mut prev = f64::INFINITY;
        let mut monotone_until = None;
        for step in 0..2000 {
            square_step(&mut p, &mut adam, 1e-2);
            let x = p.by_name("x").unwrap().data()[0];
            if monotone_until.is_none() && x * x > prev {
                monotone_until = Some(step);
            }
            prev = x * x;
        }
        let x = p.by_name("x").unwrap().data()[0];
        assert!(x.abs() < 0.1, "x = {x}");
        // Loss decreases at least until the iterate first reaches the minimum.
        assert!(monotone_until.map_or(true, |s| s > 90), "{monotone_until:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut p = one_param(3.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        square_step(&mut p, &mut adam, 0.05);
        let x = p.by_name("x").unwrap().data()[0];
        assert!((x - 2.95).abs() < 1e-9, "{x}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = one_param(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let grads = {
            let mut tape = Tape::new(&p);
            let x = tape.param_named("x");
            let z = tape.scale(x, f64::NAN);
            tape.backward(z)
        };
        let err = adam.update(&mut p, &grads, 0.1).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("x".into()));
        assert_eq!(p.by_name("x").unwrap().data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn moments_round_trip() {
        let mut p = one_param(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        square_step(&mut p, &mut adam, 0.1);
        let saved = adam.moments(&p);
        let mut restored = AdamState::from_moments(&p, &saved, adam.config, adam.step).unwrap();
        let mut q = p.clone();
        square_step(&mut p, &mut adam, 0.1);
        square_step(&mut q, &mut restored, 0.1);
        assert_eq!(p.by_name("x").unwrap().data(), q.by_name("x").unwrap().data());
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay::new(1e-3);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9_999), 1e-3);
        assert!((s.lr(10_000) - 1e-3 * 0.995).abs() < 1e-18);
        assert!((s.lr(25_000) - 1e-3 * 0.995f64.powi(2)).abs() < 1e-18);
    }
}
