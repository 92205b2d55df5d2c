use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Minimizes: pass loss gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer sized for {} parameters, got params {} / grads {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i} (step {})",
                self.step
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.weight_decay != 0.0 {
                params[i] -= lr * self.weight_decay * params[i];
            }
            if self.m[i] != 0.0 {
                let mh = self.m[i] / b1t;
                let vh = self.v[i] / b2t;
                params[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then linear decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub lr_max: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LinearSchedule {
    pub fn new(lr_max: f64, warmup_frac: f64, total: u64) -> Self {
        LinearSchedule {
            lr_max,
            warmup: (warmup_frac * total as f64).round() as u64,
            total,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            self.lr_max * step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            self.lr_max * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.update(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn warmup_is_linear() {
        let s = LinearSchedule::new(1.0, 0.2, 100);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(10) - 0.5).abs() < 1e-15);
        assert!((s.lr(20) - 1.0).abs() < 1e-15);
        assert!((s.lr(60) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr(100), 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize (x - 3)^2 from x = 0
        let mut opt = AdamW::new(1, 0.0);
        let sched = LinearSchedule::new(0.1, 0.0, 500);
        let mut x = vec![0.0];
        for s in 0..500 {
            let g = 2.0 * (x[0] - 3.0);
            opt.update(&mut x, &[g], sched.lr(s)).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(opt.update(&mut p, &[0.0, f64::NAN], 0.1), Err(Error::Numeric(_))));
    }
}
