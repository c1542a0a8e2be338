use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adaptive moment estimation over a flat parameter vector.
///
/// Sub-ranges can carry their own learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
    lr_scale: Vec<(std::ops::Range<usize>, f64)>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, m: vec![F::zero(); len], v: vec![F::zero(); len], t: 0, lr_scale: Vec::new() }
    }

    /// Restores optimizer state saved at step `t`.
    pub fn from_state(config: AdamConfig, m: Vec<F>, v: Vec<F>, t: u64) -> Self {
        assert_eq!(m.len(), v.len());
        Self { config, m, v, t, lr_scale: Vec::new() }
    }

    pub fn scale_lr(&mut self, range: std::ops::Range<usize>, factor: f64) {
        self.lr_scale.push((range, factor));
    }

    pub fn clear_lr_scales(&mut self) {
        self.lr_scale.clear();
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let eps = F::lit(c.eps);
        let n = params.len();
        let mut apply = |range: std::ops::Range<usize>, lr: f64| {
            let step = F::lit(lr / bc1);
            let inv_bc2 = F::lit(1.0 / bc2);
            let decay = F::lit(1.0 - lr * c.weight_decay);
            for i in range {
                let g = grads[i];
                self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
                self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
                let vhat = (self.v[i] * inv_bc2).sqrt();
                params[i] = params[i] * decay - step * self.m[i] / (vhat + eps);
            }
        };
        let mut covered = vec![false; n];
        for (range, factor) in &self.lr_scale {
            for flag in &mut covered[range.clone()] {
                *flag = true;
            }
            apply(range.clone(), c.lr * factor);
        }
        let mut i = 0;
        while i < covered.len() {
            if covered[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < covered.len() && !covered[i] {
                i += 1;
            }
            apply(start..i, c.lr);
        }
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = super::l2_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
