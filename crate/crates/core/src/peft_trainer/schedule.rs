use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::lm::toy::Scalar;

/// Warmup length: `round(warmup_ratio · steps)`.
pub fn warmup_steps(steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * steps as f64).round() as usize
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    let w = warmup_steps(steps, warmup_ratio);
    if step < w {
        return base_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (steps - w).max(1) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// Adam over a fixed list of flat tensors.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![F::zero(); n], vec![F::zero(); n])).unzip();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update; `params` and `grads` must follow the construction order.
    pub fn step<'p, 'g>(
        &mut self,
        lr: f64,
        params: impl IntoIterator<Item = &'p mut [F]>,
        grads: impl IntoIterator<Item = &'g [F]>,
    ) {
        self.t += 1;
        let (b1, b2) = (F::of(self.cfg.beta1), F::of(self.cfg.beta2));
        let c1 = F::one() / (F::one() - b1.powi(self.t));
        let c2 = F::one() / (F::one() - b2.powi(self.t));
        let (lr, eps) = (F::of(lr), F::of(self.cfg.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(warmup_steps(600, 0.06), 36);
        assert_eq!(lr_at(0, 600, 1e-3, 0.06), 0.0);
        assert!((lr_at(18, 600, 1e-3, 0.06) - 0.5e-3).abs() < 1e-18);
        assert_eq!(lr_at(36, 600, 1e-3, 0.06), 1e-3);
        let last = lr_at(599, 600, 1e-3, 0.06);
        assert!(last > 0.0 && last < 1e-8);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 10, 0.1, 0.0), 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [2]);
        let mut p = vec![1.0, -1.0];
        adam.step(0.1, [p.as_mut_slice()], [[3.0, -0.5].as_slice()]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }
}
