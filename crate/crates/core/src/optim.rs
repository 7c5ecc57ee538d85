//! AdamW over flat parameter vectors, plus the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

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
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for one flat parameter vector.
///
/// Weight decay is decoupled and applied only where `decay_mask` is true.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay_mask,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step: `params -= lr * adam_direction(grad)`.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for i in 0..params.len() {
            if self.decay_mask[i] && weight_decay > 0.0 {
                params[i] *= 1.0 - lr * weight_decay;
            }
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig::default(), vec![false, false]);
        let mut p = vec![1.0, -1.0];
        opt.descend(&mut p, &[3.0, -0.5], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - -0.99).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_masked() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, vec![true, false]);
        let mut p = vec![2.0, 2.0];
        opt.descend(&mut p, &[0.0, 0.0], 0.1);
        assert!((p[0] - 1.9).abs() < 1e-12);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::default(), vec![false; 2]);
        let mut p = vec![3.0, -2.0];
        for _ in 0..3000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.descend(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
        assert!((p[1] + 0.5).abs() < 1e-2);
    }
}
