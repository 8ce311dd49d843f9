use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Adam hyper-parameters for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for weights, bias and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m_weights: Vec<T>,
    pub v_weights: Vec<T>,
    pub m_bias: Vec<T>,
    pub v_bias: Vec<T>,
    pub m_theta: T,
    pub v_theta: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_weights: usize, n_bias: usize) -> Self {
        Self {
            step: 0,
            m_weights: vec![T::zero(); n_weights],
            v_weights: vec![T::zero(); n_weights],
            m_bias: vec![T::zero(); n_bias],
            v_bias: vec![T::zero(); n_bias],
            m_theta: T::zero(),
            v_theta: T::zero(),
        }
    }
}

/// Bias-corrected step sizes for the current step.
pub(crate) struct Step<T> {
    lr_t: T,
    b1: T,
    b2: T,
    eps: T,
}

impl<T: Scalar> Step<T> {
    pub fn new(cfg: &AdamConfig, step: u64) -> Self {
        let t = step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        Self {
            lr_t: T::of(cfg.lr * c2.sqrt() / c1),
            b1: T::of(cfg.beta1),
            b2: T::of(cfg.beta2),
            // epsilon rescaled so the update equals lr·m̂/(√v̂ + eps)
            eps: T::of(cfg.eps * c2.sqrt()),
        }
    }

    #[inline]
    pub fn apply(&self, p: &mut T, m: &mut T, v: &mut T, g: T) {
        *m = self.b1 * *m + (T::one() - self.b1) * g;
        *v = self.b2 * *v + (T::one() - self.b2) * g * g;
        *p -= self.lr_t * *m / (v.sqrt() + self.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::with_lr(0.1);
        let s = Step::<f64>::new(&cfg, 1);
        let (mut p, mut m, mut v) = (1.0, 0.0, 0.0);
        s.apply(&mut p, &mut m, &mut v, 3.0);
        assert!((p - 0.9).abs() < 1e-6, "{p}");
        let (mut q, mut m, mut v) = (1.0, 0.0, 0.0);
        s.apply(&mut q, &mut m, &mut v, -0.001);
        assert!((q - 1.1).abs() < 1e-4, "{q}");
    }

    #[test]
    fn matches_textbook_form() {
        let cfg = AdamConfig::default();
        let grads = [0.5, -0.2, 0.1, 0.7, -0.9];
        let (mut p, mut m, mut v) = (0.3f64, 0.0, 0.0);
        let (mut p2, mut m2, mut v2) = (0.3f64, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            Step::new(&cfg, t as u64 + 1).apply(&mut p, &mut m, &mut v, g);
            m2 = cfg.beta1 * m2 + (1.0 - cfg.beta1) * g;
            v2 = cfg.beta2 * v2 + (1.0 - cfg.beta2) * g * g;
            let mh = m2 / (1.0 - cfg.beta1.powi(t as i32 + 1));
            let vh = v2 / (1.0 - cfg.beta2.powi(t as i32 + 1));
            p2 -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((p - p2).abs() < 1e-12);
    }
}
