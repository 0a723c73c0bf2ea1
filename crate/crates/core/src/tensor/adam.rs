use indexmap::IndexMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }
}

struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Bias-corrected Adam with moment buffers keyed by parameter name.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Fails without touching anything if any gradient is missing.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter `{name}` has no gradient")));
        }
        for (name, p) in &params {
            if let Some(m) = self.moments.get(*name) {
                if m.first.len() != p.len() {
                    return Err(Error::shape("adam_step", &[m.first.len()], p.shape()));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, p) in params {
            let grad = p.take_grad().expect("checked above");
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![T::zero(); grad.len()],
                    second: vec![T::zero(); grad.len()],
                });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m.first[i] = b1 * m.first[i] + (T::one() - b1) * g;
                m.second[i] = b2 * m.second[i] + (T::one() - b2) * g * g;
                let m_hat = m.first[i] / bias1;
                let v_hat = m.second[i] / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut w = Tensor::<f64>::full(&[3], 1.5).with_requires_grad(true);
        w.set_grad(vec![0.0; 3]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([("w", &mut w)]).unwrap();
        assert_eq!(w.data(), &[1.5; 3]);
        assert!(w.grad().is_none());
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0] {
            let mut w = Tensor::<f64>::scalar(0.0).with_requires_grad(true);
            w.set_grad(vec![g]).unwrap();
            Adam::new(cfg).step([("w", &mut w)]).unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w.data()[0] - expected).abs() < 1e-15);
            assert!((w.data()[0] + cfg.lr * g.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut a = Tensor::<f64>::scalar(1.0).with_requires_grad(true);
        let mut b = Tensor::<f64>::scalar(1.0).with_requires_grad(true);
        a.set_grad(vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step([("a", &mut a), ("b", &mut b)]).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = Tensor::<f64>::scalar(0.0).with_requires_grad(true);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let mut tape = Tape::new();
            let v = tape.watch(&mut w).unwrap();
            let five = tape.constant(Tensor::scalar(5.0));
            let d = tape.sub(v, five).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let mut grads = tape.backward(sq).unwrap();
            grads.apply_to(&mut w).unwrap();
            adam.step([("w", &mut w)]).unwrap();
        }
        assert!((w.data()[0] - 5.0).abs() < 1e-2, "w = {}", w.data()[0]);
    }
}
