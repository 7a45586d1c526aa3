use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter name.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Updates one parameter in place. A missing gradient is a contract
    /// violation: only trainable parameters should be passed in.
    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: Option<&[T]>) -> Result<()> {
        let grad =
            grad.ok_or_else(|| Error::contract(format!("parameter {name} has no gradient")))?;
        if grad.len() != param.numel() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let n = param.numel();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            });
        st.t += 1;
        let c = &self.config;
        let lr = T::cast(c.lr);
        let b1 = T::cast(c.beta1);
        let b2 = T::cast(c.beta2);
        let eps = T::cast(c.eps);
        let decay = T::one() - lr * T::cast(c.weight_decay);
        let bc1 = T::one() - T::cast(c.beta1.powi(st.t));
        let bc2 = T::one() - T::cast(c.beta2.powi(st.t));
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn steps_taken(&self, name: &str) -> i32 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_on_parabola() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut x = Tensor::scalar(1.0);
        let g = [2.0 * x.item()];
        opt.step("x", &mut x, Some(&g)).unwrap();
        assert!(x.item() < 1.0);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg);
        let mut x = Tensor::scalar(2.0);
        opt.step("x", &mut x, Some(&[0.0])).unwrap();
        assert!((x.item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut x = Tensor::scalar(1.0f32);
        assert!(matches!(
            opt.step("x", &mut x, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
        });
        let mut p = Tensor::scalar(1.5);
        // Independent hand simulation on f(x) = x^2.
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x = x * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);

            let grad = [2.0 * p.item()];
            opt.step("p", &mut p, Some(&grad)).unwrap();
        }
        assert!((p.item() - x).abs() < 1e-12, "{} vs {}", p.item(), x);
        assert_eq!(opt.steps_taken("p"), 2);
    }
}
