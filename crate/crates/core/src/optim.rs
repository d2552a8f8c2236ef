//! Adam/AdamW over flat parameter slices and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (0 gives plain Adam).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-slot first and second moments; slots are sized on first use.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    moments: Vec<(Vec<S>, Vec<S>)>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, moments: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the bias-correction counter; call once per optimizer step,
    /// before the [`Adam::update`] calls of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter slot in place.
    pub fn update(&mut self, slot: usize, param: &mut [S], grad: &[S], lr: f64, decay: bool) {
        assert_eq!(param.len(), grad.len(), "param/grad length");
        if self.moments.len() <= slot {
            self.moments.resize_with(slot + 1, || (Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            *m = vec![S::zero(); param.len()];
            *v = vec![S::zero(); param.len()];
        }
        let c = &self.config;
        let t = self.step.max(1) as i32;
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, eps, lr_s) = (S::one(), S::of(c.eps), S::of(lr));
        let wd = if decay { S::of(lr * c.weight_decay) } else { S::zero() };
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= wd * param[i];
            param[i] -= lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_max · end_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub end_factor: f64,
}

impl Schedule {
    /// Warmup length `max(1, ceil(ratio · total))`.
    pub fn with_ratio(lr_max: f64, total_steps: usize, warmup_ratio: f64, end_factor: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).ceil() as usize).max(1);
        Self { lr_max, warmup_steps, total_steps, end_factor }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.lr_max * (step + 1) as f64 / w as f64;
        }
        let end = self.lr_max * self.end_factor;
        let span = self.total_steps.saturating_sub(w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        end + (self.lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::with_ratio(1e-3, 1000, 0.03, 1e-4);
        assert_eq!(s.warmup_steps, 30);
        assert!((s.lr(0) - 1e-3 / 30.0).abs() < 1e-18);
        assert!((s.lr(30) - 1e-3).abs() < 1e-18);
        assert!((s.lr(1000) - 1e-7).abs() < 1e-18);
        assert!((30..1000).all(|k| s.lr(k + 1) <= s.lr(k)));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.begin_step();
            adam.update(0, &mut x, &g, 1e-2, false);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }
}
