use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, weight_decay: 0.0, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer over {} values got {} params and {} grads",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Linear warm-up from `start` to `peak`, then cosine decay back to `start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(start: f64, peak: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        LrSchedule {
            start,
            peak,
            warmup_steps: (warmup_epochs * steps_per_epoch) as u64,
            total_steps: (epochs * steps_per_epoch) as u64,
        }
    }

    /// Rate at `step`: `peak` exactly at the end of warm-up, `start` at
    /// `total_steps` and beyond.
    pub fn at(&self, step: u64) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            return self.start + (self.peak - self.start) * step as f64 / w as f64;
        }
        if t <= w || step >= t {
            return if t <= w { self.peak } else { self.start };
        }
        let progress = (step - w) as f64 / (t - w) as f64;
        self.start + (self.peak - self.start) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_is_sign_sized() {
        let mut opt = Adam::new(3, 0.9, 0.999, 1e-8);
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &g, 0.01).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + 0.01 * gi / (gi.abs() + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn three_step_scalar_trace() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let gs = [1.0, -0.5, 2.0];
        let mut opt = Adam::new(1, b1, b2, eps);
        let mut p = [0.3];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for (t, g) in gs.iter().enumerate() {
            opt.step(&mut p, &[*g], lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-6, 1e-5, 5, 40, 10);
        assert_eq!(s.at(0), 1e-6);
        assert!((s.at(50) - 1e-5).abs() < 1e-18);
        assert!((s.at(25) - 5.5e-6).abs() < 1e-18);
        let mid = 50 + 350 / 2;
        assert!((s.at(mid) - 5.5e-6).abs() < 1e-15);
        assert!((s.at(400) - 1e-6).abs() < 1e-18);
        assert!(s.at(60) < s.at(50) && s.at(60) > s.at(300));
    }

    #[test]
    fn schedule_without_warmup() {
        let s = LrSchedule::new(0.0, 1.0, 0, 1, 4);
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(2) - 0.5).abs() < 1e-12);
    }
}
